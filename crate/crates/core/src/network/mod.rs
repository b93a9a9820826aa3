//! Encoder/decoder segmentation network: a dense stem, four attention
//! residual layers with random decimation, four upsampling decoders with
//! skip connections, and a small classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor, Var};
use crate::dla::{DlaConfig, DlaResidual, PePlacement, PeVariant, PoolMode, SaAggregate, Switch};
use crate::error::{Error, Result};
use crate::geometry::{knn, nearest_coarse_map, random_subsample, NeighborIndex, PointCloud};
use crate::layers::{BatchNorm, Ctx, Linear, Mode};
use crate::rng::Prng;

/// Width of the stem output.
pub const STEM_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlaNetConfig {
    pub d_in: usize,
    pub n_class: usize,
    pub encoder_dims: Vec<usize>,
    pub decimation: usize,
    pub k_neighbors: usize,
    pub head_dims: Vec<usize>,
    pub dropout_p: f64,
    pub use_rgb: bool,
    #[serde(rename = "pe.variant")]
    pub pe_variant: PeVariant,
    #[serde(rename = "pe.bn")]
    pub pe_bn: Switch,
    #[serde(rename = "sa.pe_placement")]
    pub sa_pe_placement: PePlacement,
    #[serde(rename = "sa.bn")]
    pub sa_bn: Switch,
    #[serde(rename = "sa.aggregate")]
    pub sa_aggregate: SaAggregate,
    #[serde(rename = "ap.mode")]
    pub ap_mode: PoolMode,
}

impl Default for DlaNetConfig {
    fn default() -> Self {
        let dla = DlaConfig::default();
        DlaNetConfig {
            d_in: 6,
            n_class: 8,
            encoder_dims: vec![32, 128, 256, 512],
            decimation: 4,
            k_neighbors: 16,
            head_dims: vec![64, 32],
            dropout_p: 0.5,
            use_rgb: true,
            pe_variant: dla.pe_variant,
            pe_bn: dla.pe_bn,
            sa_pe_placement: dla.sa_pe_placement,
            sa_bn: dla.sa_bn,
            sa_aggregate: dla.sa_aggregate,
            ap_mode: dla.ap_mode,
        }
    }
}

impl DlaNetConfig {
    pub fn dla(&self) -> DlaConfig {
        DlaConfig {
            pe_variant: self.pe_variant,
            pe_bn: self.pe_bn,
            sa_pe_placement: self.sa_pe_placement,
            sa_bn: self.sa_bn,
            sa_aggregate: self.sa_aggregate,
            ap_mode: self.ap_mode,
        }
    }

    /// Toggle RGB input, keeping `d_in` consistent.
    pub fn set_rgb(&mut self, on: bool) {
        self.use_rgb = on;
        self.d_in = if on { 6 } else { 3 };
    }

    /// Decoder output widths: the encoder widths mirrored, ending on the first.
    pub fn decoder_dims(&self) -> Vec<usize> {
        let e = &self.encoder_dims;
        let mut out: Vec<usize> = e[..e.len() - 1].iter().rev().copied().collect();
        out.push(e[0]);
        out
    }

    /// Smallest cloud whose coarsest level still holds a point.
    pub fn min_points(&self) -> usize {
        self.decimation.pow(self.encoder_dims.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.encoder_dims.len() != 4 {
            return bad(format!("encoder_dims must list 4 widths, got {}", self.encoder_dims.len()));
        }
        if let Some(d) = self.encoder_dims.iter().find(|&&d| d == 0 || d % 2 != 0) {
            return bad(format!("encoder width {d} must be even and positive"));
        }
        if self.decimation != 4 {
            return bad(format!("decimation must be 4 (N -> N/256 over four layers), got {}", self.decimation));
        }
        if self.d_in != if self.use_rgb { 6 } else { 3 } {
            return bad(format!("d_in = {} does not match use_rgb = {}", self.d_in, self.use_rgb));
        }
        if self.n_class < 2 || self.n_class > 256 {
            return bad(format!("n_class = {} must lie in [2, 256]", self.n_class));
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be positive".into());
        }
        if self.head_dims.len() != 2 || self.head_dims.contains(&0) {
            return bad("head_dims must list two positive widths".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p = {} must lie in [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

/// One resolution level of the point pyramid.
#[derive(Clone, Debug)]
pub struct Level {
    pub positions: Vec<[f64; 3]>,
    pub neighbors: NeighborIndex,
    /// Rows of this level kept for the next one (ascending).
    pub subsample: Vec<u32>,
    /// Nearest next-level point for every point of this level.
    pub upsample: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Level>,
    pub coarsest: Vec<[f64; 3]>,
}

impl Pyramid {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.levels.iter().map(|l| l.positions.len()).collect();
        s.push(self.coarsest.len());
        s
    }
}

/// Neighbourhoods are recomputed at every level on that level's points;
/// `K` is capped by the level size.
pub fn build_pyramid(positions: &[[f64; 3]], cfg: &DlaNetConfig, rng: &mut Prng) -> Result<Pyramid> {
    let min = cfg.min_points();
    if positions.len() < min {
        return Err(Error::InvalidArgument(format!(
            "cloud has {} points; at least {min} are needed for four decimation layers",
            positions.len()
        )));
    }
    let mut levels = Vec::with_capacity(cfg.encoder_dims.len());
    let mut current = positions.to_vec();
    for l in 0..cfg.encoder_dims.len() {
        let n = current.len();
        let mut neighbors = knn(&current, &current, cfg.k_neighbors.min(n))?;
        neighbors.level = l;
        let keep = n.div_ceil(cfg.decimation);
        let subsample = random_subsample(n, keep, rng)?;
        let next: Vec<[f64; 3]> = subsample.iter().map(|&i| current[i as usize]).collect();
        let upsample = nearest_coarse_map(&current, &next)?;
        levels.push(Level { positions: current, neighbors, subsample, upsample });
        current = next;
    }
    Ok(Pyramid { levels, coarsest: current })
}

/// `xyz ⊕ rgb/255`, or `xyz` alone, with xyz taken relative to the cloud centroid.
pub fn input_features(cloud: &PointCloud, use_rgb: bool) -> Result<Tensor<f64>> {
    let n = cloud.len();
    let mut centroid = [0.0; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    let centroid = centroid.map(|v| v / n.max(1) as f64);
    let rel = |p: &[f64; 3]| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
    if use_rgb {
        let colors = cloud
            .colors
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("RGB input requested but the cloud has no colors".into()))?;
        let mut data = Vec::with_capacity(n * 6);
        for (p, c) in cloud.positions.iter().zip(colors) {
            data.extend_from_slice(&rel(p));
            data.extend(c.iter().map(|&v| v as f64 / 255.0));
        }
        Tensor::new(vec![n, 6], data)
    } else {
        Tensor::new(vec![n, 3], cloud.positions.iter().flat_map(rel).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub lin: Linear,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct DlaNet {
    pub cfg: DlaNetConfig,
    pub stem: Linear,
    pub encoders: Vec<DlaResidual>,
    pub decoders: Vec<Decoder>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub classifier: Linear,
}

impl DlaNet {
    /// Registers every parameter in `store` with Glorot-uniform weights.
    pub fn new<T: Real>(cfg: &DlaNetConfig, store: &mut ParamStore<T>, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let dla = cfg.dla();
        let stem = Linear::new(store, "stem", cfg.d_in, STEM_WIDTH, true, rng)?;
        let mut encoders = Vec::new();
        let mut width = STEM_WIDTH;
        for (l, &d) in cfg.encoder_dims.iter().enumerate() {
            encoders.push(DlaResidual::new(store, &format!("enc{l}"), width, d, &dla, rng)?);
            width = d;
        }
        let mut decoders = Vec::new();
        let enc = &cfg.encoder_dims;
        for (i, &d) in cfg.decoder_dims().iter().enumerate() {
            let skip = enc[enc.len() - 1 - i];
            let name = format!("dec{i}");
            decoders.push(Decoder {
                lin: Linear::new(store, &format!("{name}.lin"), width + skip, d, true, rng)?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), d)?,
            });
            width = d;
        }
        let [h1, h2] = [cfg.head_dims[0], cfg.head_dims[1]];
        Ok(DlaNet {
            cfg: cfg.clone(),
            stem,
            encoders,
            decoders,
            fc1: Linear::new(store, "head.fc1", width, h1, true, rng)?,
            fc2: Linear::new(store, "head.fc2", h1, h2, true, rng)?,
            classifier: Linear::new(store, "head.classifier", h2, cfg.n_class, true, rng)?,
        })
    }

    /// Fresh parameters from `seed`.
    pub fn init<T: Real>(cfg: &DlaNetConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(seed);
        let net = DlaNet::new(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    /// Raw logits `[N, n_class]`. `rng` drives dropout in train mode.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &Tensor<f64>,
        pyramid: &Pyramid,
        rng: &mut Prng,
    ) -> Result<Var> {
        let n = pyramid.levels[0].positions.len();
        if features.shape() != [n, self.cfg.d_in] {
            return Err(Error::shape("network input", features.shape(), &[n, self.cfg.d_in]));
        }
        let x = ctx.tape.constant(features.cast())?;
        let mut x = self.stem.forward(ctx, x)?;
        ctx.record("stem", x);
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (l, (enc, level)) in self.encoders.iter().zip(&pyramid.levels).enumerate() {
            let y = enc.forward(ctx, x, &level.positions, &level.neighbors)?;
            ctx.record(format!("enc{l}"), y);
            skips.push(y);
            x = ctx.tape.gather_rows(y, &level.subsample, &[level.subsample.len()])?;
            ctx.record(format!("enc{l}.down"), x);
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            let l = self.encoders.len() - 1 - i;
            let level = &pyramid.levels[l];
            let up = ctx.tape.gather_rows(x, &level.upsample, &[level.upsample.len()])?;
            let cat = ctx.tape.concat_channels(up, skips[l])?;
            let h = dec.lin.forward(ctx, cat)?;
            let h = dec.bn.forward(ctx, h)?;
            x = ctx.tape.relu(h)?;
            ctx.record(format!("dec{i}"), x);
        }
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.dropout(h, self.cfg.dropout_p, ctx.mode == Mode::Train, rng)?;
        let logits = self.classifier.forward(ctx, h)?;
        ctx.record("logits", logits);
        Ok(logits)
    }
}

/// Argmax per row; ties go to the smaller class index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.channels();
    logits
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
