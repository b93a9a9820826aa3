//! Dual local attention: a relative position encoding shared by a vector
//! self-attention block and an attentive pooling block, wrapped in a
//! residual unit.

mod config;

pub use config::{DlaConfig, PePlacement, PeVariant, PoolMode, SaAggregate, Switch};

use crate::autodiff::{ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::NeighborIndex;
use crate::layers::{bn_relu, BatchNorm, Ctx, Linear};
use crate::rng::Prng;

/// Per-neighbour spatial features `[N, K, raw_width]` for `variant`.
/// Relative offsets are `p_i − p_k`; the distance is their Euclidean norm.
pub fn raw_position_features(positions: &[[f64; 3]], nb: &NeighborIndex, variant: PeVariant) -> Result<Tensor<f64>> {
    if nb.n != positions.len() {
        return Err(Error::shape("position_encoding", &[positions.len(), 3], &[nb.n, nb.k]));
    }
    let w = variant.raw_width();
    let mut out = Vec::with_capacity(nb.n * nb.k * w);
    for (i, pi) in positions.iter().enumerate() {
        for &j in nb.row(i) {
            let pk = positions
                .get(j as usize)
                .ok_or(Error::IndexOutOfRange { op: "position_encoding", index: j as usize, len: positions.len() })?;
            let rel = [pi[0] - pk[0], pi[1] - pk[1], pi[2] - pk[2]];
            let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
            match variant {
                PeVariant::NeighborOnly => out.extend_from_slice(pk),
                PeVariant::RelativeOnly => out.extend_from_slice(&rel),
                PeVariant::RelativeDist => {
                    out.extend_from_slice(&rel);
                    out.push(dist);
                }
                PeVariant::CenterRelativeDist => {
                    out.extend_from_slice(pi);
                    out.extend_from_slice(&rel);
                    out.push(dist);
                }
                PeVariant::NeighborRelativeDist => {
                    out.extend_from_slice(pk);
                    out.extend_from_slice(&rel);
                    out.push(dist);
                }
                PeVariant::All => {
                    out.extend_from_slice(pi);
                    out.extend_from_slice(pk);
                    out.extend_from_slice(&rel);
                    out.push(dist);
                }
            }
        }
    }
    Tensor::new(vec![nb.n, nb.k, w], out)
}

/// `linear → ReLU → linear`, then BN + ReLU when enabled.
#[derive(Clone, Debug)]
pub struct PositionEncoding {
    pub variant: PeVariant,
    pub l1: Linear,
    pub l2: Linear,
    pub bn: Option<BatchNorm>,
}

impl PositionEncoding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        variant: PeVariant,
        bn: bool,
        rng: &mut Prng,
    ) -> Result<Self> {
        Ok(PositionEncoding {
            variant,
            l1: Linear::new(store, &format!("{name}.l1"), variant.raw_width(), d, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d, d, true, rng)?,
            bn: if bn { Some(BatchNorm::new(store, &format!("{name}.bn"), d)?) } else { None },
        })
    }

    /// Encoding `c` of shape `[N, K, d]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, positions: &[[f64; 3]], nb: &NeighborIndex) -> Result<Var> {
        let raw = raw_position_features(positions, nb, self.variant)?;
        if raw.channels() != self.l1.fan_in {
            return Err(Error::shape("position_encoding", raw.shape(), &[self.l1.fan_in, self.l1.fan_out]));
        }
        let raw = ctx.tape.constant(raw.cast())?;
        let h = self.l1.forward(ctx, raw)?;
        let h = ctx.tape.relu(h)?;
        let c = self.l2.forward(ctx, h)?;
        bn_relu(ctx, self.bn.as_ref(), c)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub alpha: Linear,
    pub beta: Linear,
    pub gamma: Linear,
    pub eta1: Linear,
    pub eta2: Linear,
    pub bn: Option<BatchNorm>,
    pub placement: PePlacement,
    pub aggregate: SaAggregate,
}

pub struct SaOutput {
    /// `[N, d]` when summing over neighbours, else `[N, K, d]`.
    pub out: Var,
    /// Softmax weights `[N, K, d]`.
    pub weights: Var,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        cfg: &DlaConfig,
        rng: &mut Prng,
    ) -> Result<Self> {
        let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut Prng| {
            Linear::new(store, &format!("{name}.{part}"), d, d, true, rng)
        };
        Ok(SelfAttention {
            alpha: lin(store, "alpha", rng)?,
            beta: lin(store, "beta", rng)?,
            gamma: lin(store, "gamma", rng)?,
            eta1: lin(store, "eta1", rng)?,
            eta2: lin(store, "eta2", rng)?,
            bn: if cfg.sa_bn.is_on() { Some(BatchNorm::new(store, &format!("{name}.bn"), d)?) } else { None },
            placement: cfg.sa_pe_placement,
            aggregate: cfg.sa_aggregate,
        })
    }

    /// `F_i = Σ_k softmax_k(η(α(f_i) − β(f_k) + c_ik)) ⊙ (γ(f_k) + c_ik)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var, c: Var, nb: &NeighborIndex) -> Result<SaOutput> {
        let d = self.alpha.fan_in;
        let fs = ctx.tape.shape(f).to_vec();
        if fs != [nb.n, d] {
            return Err(Error::shape("self_attention", &fs, &[nb.n, d]));
        }
        let cs = ctx.tape.shape(c).to_vec();
        if cs != [nb.n, nb.k, d] {
            return Err(Error::shape("self_attention", &cs, &[nb.n, nb.k, d]));
        }
        if nb.k == 0 {
            return Err(Error::invalid("self_attention: K must be at least 1"));
        }
        let lead = [nb.n, nb.k];
        let a = self.alpha.forward(ctx, f)?;
        let b = self.beta.forward(ctx, f)?;
        let g = self.gamma.forward(ctx, f)?;
        let bk = ctx.tape.gather_rows(b, &nb.idx, &lead)?;
        let gk = ctx.tape.gather_rows(g, &nb.idx, &lead)?;
        let mut rel = ctx.tape.sub(a, bk)?;
        if self.placement.in_mapping() {
            rel = ctx.tape.add(rel, c)?;
        }
        let h = self.eta1.forward(ctx, rel)?;
        let h = ctx.tape.relu(h)?;
        let logits = self.eta2.forward(ctx, h)?;
        let weights = ctx.tape.softmax_over_neighbors(logits)?;
        let values = if self.placement.in_values() { ctx.tape.add(gk, c)? } else { gk };
        let weighted = ctx.tape.mul(weights, values)?;
        let out = match self.aggregate {
            SaAggregate::Sum => ctx.tape.sum_over_neighbors(weighted)?,
            SaAggregate::PerNeighbor => weighted,
        };
        let out = bn_relu(ctx, self.bn.as_ref(), out)?;
        Ok(SaOutput { out, weights })
    }
}

#[derive(Clone, Debug)]
pub struct AttentivePooling {
    pub mode: PoolMode,
    /// Present in `attentive` and `no_pe` modes.
    pub score: Option<Linear>,
}

pub struct ApOutput {
    pub out: Var,
    /// Softmax scores `[N, K, width]` in the score-based modes.
    pub scores: Option<Var>,
}

impl AttentivePooling {
    /// Input width of the pooled features for a working width `d`.
    pub fn pooled_width(mode: PoolMode, d: usize) -> usize {
        match mode {
            PoolMode::Attentive | PoolMode::Max | PoolMode::Avg => 2 * d,
            PoolMode::NoPe | PoolMode::Passthrough => d,
        }
    }

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, mode: PoolMode, rng: &mut Prng) -> Result<Self> {
        let w = Self::pooled_width(mode, d);
        let score = match mode {
            PoolMode::Attentive | PoolMode::NoPe => Some(Linear::new(store, &format!("{name}.score"), w, w, true, rng)?),
            _ => None,
        };
        Ok(AttentivePooling { mode, score })
    }

    /// Pools `F` (`[N, d]` broadcast over k, or `[N, K, d]`) together with
    /// `c` into one row per point.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var, c: Var) -> Result<ApOutput> {
        let cs = ctx.tape.shape(c).to_vec();
        let [n, k, d] = cs[..] else {
            return Err(Error::shape("attentive_pooling", &cs, &[0, 0, 0]));
        };
        let fs = ctx.tape.shape(f).to_vec();
        let per_neighbor = match fs[..] {
            [fn_, fd] if fn_ == n && fd == d => false,
            [fn_, fk, fd] if fn_ == n && fk == k && fd == d => true,
            _ => return Err(Error::shape("attentive_pooling", &fs, &cs)),
        };
        if self.mode == PoolMode::Passthrough {
            let out = if per_neighbor { ctx.tape.mean_over_neighbors(f)? } else { f };
            return Ok(ApOutput { out, scores: None });
        }
        let fk = if per_neighbor { f } else { ctx.tape.repeat_over_neighbors(f, k)? };
        let hat = if self.mode == PoolMode::NoPe { fk } else { ctx.tape.concat_channels(fk, c)? };
        match self.mode {
            PoolMode::Max => Ok(ApOutput { out: ctx.tape.max_over_neighbors(hat)?, scores: None }),
            PoolMode::Avg => Ok(ApOutput { out: ctx.tape.mean_over_neighbors(hat)?, scores: None }),
            _ => {
                let score = self.score.as_ref().expect("score layer exists in attentive modes");
                let s = score.forward(ctx, hat)?;
                let s = ctx.tape.softmax_over_neighbors(s)?;
                let weighted = ctx.tape.mul(s, hat)?;
                Ok(ApOutput { out: ctx.tape.sum_over_neighbors(weighted)?, scores: Some(s) })
            }
        }
    }
}

/// `ReLU(post(pool(attend(in_proj(x), pe))) + skip(x))`.
#[derive(Clone, Debug)]
pub struct DlaResidual {
    pub d: usize,
    pub in_proj: Linear,
    pub pe: PositionEncoding,
    pub sa: SelfAttention,
    pub ap: AttentivePooling,
    pub post: Linear,
    /// `None` when the input already has the output width.
    pub skip: Option<Linear>,
}

impl DlaResidual {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        d_out: usize,
        cfg: &DlaConfig,
        rng: &mut Prng,
    ) -> Result<Self> {
        if d_out == 0 || d_out % 2 != 0 {
            return Err(Error::invalid(format!("{name}: output width {d_out} must be even and positive")));
        }
        let d = d_out / 2;
        Ok(DlaResidual {
            d,
            in_proj: Linear::new(store, &format!("{name}.in_proj"), c_in, d, true, rng)?,
            pe: PositionEncoding::new(store, &format!("{name}.pe"), d, cfg.pe_variant, cfg.pe_bn.is_on(), rng)?,
            sa: SelfAttention::new(store, &format!("{name}.sa"), d, cfg, rng)?,
            ap: AttentivePooling::new(store, &format!("{name}.ap"), d, cfg.ap_mode, rng)?,
            post: Linear::new(
                store,
                &format!("{name}.post"),
                AttentivePooling::pooled_width(cfg.ap_mode, d),
                d_out,
                true,
                rng,
            )?,
            skip: if c_in == d_out {
                None
            } else {
                Some(Linear::new(store, &format!("{name}.skip"), c_in, d_out, false, rng)?)
            },
        })
    }

    pub fn d_out(&self) -> usize {
        self.post.fan_out
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: Var,
        positions: &[[f64; 3]],
        nb: &NeighborIndex,
    ) -> Result<Var> {
        let x = self.in_proj.forward(ctx, features)?;
        let c = self.pe.forward(ctx, positions, nb)?;
        ctx.record("pe", c);
        let f = self.sa.forward(ctx, x, c, nb)?.out;
        ctx.record("sa", f);
        let pooled = self.ap.forward(ctx, f, c)?.out;
        ctx.record("ap", pooled);
        let main = self.post.forward(ctx, pooled)?;
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, features)?,
            None => features,
        };
        let sum = ctx.tape.add(main, skip)?;
        ctx.tape.relu(sum)
    }
}
