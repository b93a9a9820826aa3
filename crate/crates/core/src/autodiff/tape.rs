//! Recording tape and the fixed op set.
//!
//! Every op evaluates eagerly, appends a node holding its output and whatever
//! it needs for the reverse pass, and returns a [`Var`] handle. Nodes are
//! stored in recording order, so the reverse pass is a single backwards sweep.
//!
//! Neighbor tensors use the layout `[N, K, C]`. Ops that take a per-point
//! tensor `[N, C]` together with a neighbor tensor broadcast the former along
//! `K`.

use crate::autodiff::{BnUpdate, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Prng;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    /// Left operand is `[N, C]`, repeated `k` times along the neighbor axis.
    Lhs(usize),
    Rhs(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    RepeatK {
        x: Var,
        k: usize,
    },
    SumK {
        x: Var,
    },
    MeanK {
        x: Var,
    },
    MaxK {
        x: Var,
        arg: Vec<u32>,
    },
    Gather {
        src: Var,
        idx: Vec<u32>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        probs: Vec<T>,
    },
    SumAll {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics returned by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnUpdate<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bn_updates: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bn_updates.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    /// Leaf holding a copy of a stored parameter; its gradient is reported
    /// by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let value = p.value.clone();
        self.push(&p.name, value, Op::Param(id), p.trainable)
    }

    pub fn push_bn_update(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// `y[.., j] = Σ_i x[.., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("relu", value, Op::Relu { x }, needs)
    }

    fn bn_check(&self, x: Var, scale: Var, shift: Var) -> Result<usize> {
        let c = self.value(x).channels();
        for p in [scale, shift] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        Ok(c)
    }

    /// Train-mode batch norm: per-channel statistics over every leading row.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let c = self.bn_check(x, scale, shift)?;
        let xv = self.value(x);
        let rows = xv.rows();
        if rows < 2 {
            return Err(Error::BatchTooSmall { rows });
        }
        let inv_rows = T::of(1.0 / rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_rows);
        let mut var = vec![T::zero(); c];
        for row in xv.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s * inv_rows);
        let value = self.bn_apply(x, scale, shift, &mean, &var, true)?;
        Ok((value, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm with supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let c = self.bn_check(x, scale, shift)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[c], &[mean.len(), var.len()]));
        }
        self.bn_apply(x, scale, shift, mean, var, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        var: &[T],
        train: bool,
    ) -> Result<Var> {
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let c = xv.channels();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ((row, hrow), orow) in xv
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                hrow[j] = h;
                orow[j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
            needs,
        )
    }

    fn dims3(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [n, k, c] => Ok((n, k, c)),
            ref s => Err(Error::shape(op, s, &[0, 0, 0])),
        }
    }

    /// Softmax along the neighbor axis of `[N, K, C]`, independently per channel.
    pub fn softmax_over_neighbors(&mut self, x: Var) -> Result<Var> {
        let (n, k, c) = self.dims3("softmax_over_neighbors", x)?;
        if k == 0 {
            return Err(Error::invalid("softmax_over_neighbors: K must be at least 1"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut max = vec![T::zero(); c];
        let mut sum = vec![T::zero(); c];
        for p in 0..n {
            let block = &xv[p * k * c..(p + 1) * k * c];
            let oblock = &mut out[p * k * c..(p + 1) * k * c];
            max.copy_from_slice(&block[..c]);
            for row in block.chunks_exact(c).skip(1) {
                for (m, &v) in max.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            sum.iter_mut().for_each(|s| *s = T::zero());
            for (row, orow) in block.chunks_exact(c).zip(oblock.chunks_exact_mut(c)) {
                for j in 0..c {
                    let e = (row[j] - max[j]).exp();
                    orow[j] = e;
                    sum[j] = sum[j] + e;
                }
            }
            for orow in oblock.chunks_exact_mut(c) {
                for (o, &s) in orow.iter_mut().zip(&sum) {
                    *o = *o / s;
                }
            }
        }
        let value = Tensor::new(vec![n, k, c], out)?;
        let needs = self.needs(x);
        self.push("softmax_over_neighbors", value, Op::Softmax { x }, needs)
    }

    /// Channel concatenation; leading axes must match exactly.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).rows();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_channels", Tensor::new(shape, out)?, Op::Concat { a, b }, needs)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((Bcast::None, sa.to_vec()));
        }
        let per_point = |small: &[usize], big: &[usize]| {
            big.len() == 3
                && (small == [big[0], big[2]] || small == [big[0], 1, big[2]])
        };
        if per_point(sa, sb) {
            Ok((Bcast::Lhs(sb[1]), sb.to_vec()))
        } else if per_point(sb, sa) {
            Ok((Bcast::Rhs(sa[1]), sa.to_vec()))
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, kind: BinKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (bcast, shape) = self.bcast(op, a, b)?;
        let c = *shape.last().unwrap_or(&1);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: usize = shape.iter().product();
        let mut out = vec![T::zero(); total];
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        match bcast {
            Bcast::None => {
                for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                    *o = f(x, y);
                }
            }
            Bcast::Lhs(k) => {
                for (r, orow) in out.chunks_exact_mut(c).enumerate() {
                    let arow = &av[(r / k) * c..(r / k + 1) * c];
                    let brow = &bv[r * c..(r + 1) * c];
                    for j in 0..c {
                        orow[j] = f(arow[j], brow[j]);
                    }
                }
            }
            Bcast::Rhs(k) => {
                for (r, orow) in out.chunks_exact_mut(c).enumerate() {
                    let arow = &av[r * c..(r + 1) * c];
                    let brow = &bv[(r / k) * c..(r / k + 1) * c];
                    for j in 0..c {
                        orow[j] = f(arow[j], brow[j]);
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            op,
            Tensor::new(shape, out)?,
            Op::Binary { kind, a, b, bcast },
            needs,
        )
    }

    /// Elementwise `a + b`; a `[N, C]` (or `[N, 1, C]`) operand broadcasts over `K`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    /// Elementwise `a - b` with the same broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    /// Hadamard product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    /// `[N, C] -> [N, K, C]` by copying each row `k` times.
    pub fn repeat_over_neighbors(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || k == 0 {
            return Err(Error::shape("repeat_over_neighbors", &s, &[k]));
        }
        let (n, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * k * c);
        for row in xv.chunks_exact(c.max(1)).take(n) {
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        out.resize(n * k * c, T::zero());
        let needs = self.needs(x);
        self.push(
            "repeat_over_neighbors",
            Tensor::new(vec![n, k, c], out)?,
            Op::RepeatK { x, k },
            needs,
        )
    }

    /// Sum along `K` of `[N, K, C]`, accumulated in ascending `k` order.
    pub fn sum_over_neighbors(&mut self, x: Var) -> Result<Var> {
        let (n, k, c) = self.dims3("sum_over_neighbors", x)?;
        let out = reduce_k(self.value(x).data(), n, k, c, |acc, v| acc + v);
        let needs = self.needs(x);
        self.push("sum_over_neighbors", Tensor::new(vec![n, c], out)?, Op::SumK { x }, needs)
    }

    /// Mean along `K`, computed as `Σ_k x_k · (1/K)` in ascending `k` order.
    pub fn mean_over_neighbors(&mut self, x: Var) -> Result<Var> {
        let (n, k, c) = self.dims3("mean_over_neighbors", x)?;
        if k == 0 {
            return Err(Error::invalid("mean_over_neighbors: K must be at least 1"));
        }
        let inv = T::one() / T::of(k as f64);
        let out = reduce_k(self.value(x).data(), n, k, c, |acc, v| acc + v * inv);
        let needs = self.needs(x);
        self.push("mean_over_neighbors", Tensor::new(vec![n, c], out)?, Op::MeanK { x }, needs)
    }

    /// Channelwise max along `K`; ties resolve to the smallest `k`.
    pub fn max_over_neighbors(&mut self, x: Var) -> Result<Var> {
        let (n, k, c) = self.dims3("max_over_neighbors", x)?;
        if k == 0 {
            return Err(Error::invalid("max_over_neighbors: K must be at least 1"));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        let mut arg = vec![0u32; n * c];
        for p in 0..n {
            let block = &xv[p * k * c..(p + 1) * k * c];
            let o = &mut out[p * c..(p + 1) * c];
            let a = &mut arg[p * c..(p + 1) * c];
            o.copy_from_slice(&block[..c]);
            for kk in 1..k {
                let row = &block[kk * c..(kk + 1) * c];
                for j in 0..c {
                    if row[j] > o[j] {
                        o[j] = row[j];
                        a[j] = kk as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            "max_over_neighbors",
            Tensor::new(vec![n, c], out)?,
            Op::MaxK { x, arg },
            needs,
        )
    }

    /// Row gather: `out[i.., :] = src[idx[i..], :]`, output leading shape `lead`.
    pub fn gather_rows(&mut self, src: Var, idx: &[u32], lead: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 || lead.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather_rows", &s, lead));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= m) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad as usize,
                len: m,
            });
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            let i = i as usize;
            out.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let mut shape = lead.to_vec();
        shape.push(c);
        let needs = self.needs(src);
        self.push(
            "gather_rows",
            Tensor::new(shape, out)?,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Inverted dropout. Identity (no new node) in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Prng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.next_f64() < p { T::zero() } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("dropout", value, Op::Dropout { x, mask }, needs)
    }

    /// Mean over rows of `-log softmax(logits)[label]` (fused, max-shifted).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::IndexOutOfRange {
                op: "cross_entropy",
                index: bad as usize,
                len: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        for (r, (row, prow)) in lv.chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            prow.iter_mut().for_each(|p| *p = *p / sum);
            let label = labels[r] as usize;
            total += (sum.ln() - (row[label] - max)).f64();
        }
        let value = Tensor::scalar(T::of(total / n as f64));
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per entry of
    /// `store` (zeros where the parameter does not reach `loss`). The tape is
    /// consumed; call [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: Var, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss { shape: ls.to_vec() });
        }
        self.consumed = true;

        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut [Tensor<T>],
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                for (o, &gv) in out[id.0].data_mut().iter_mut().zip(g) {
                    *o = *o + gv;
                }
            }
            Op::Linear { x, w, b } => {
                let (cin, cout) = (val(*w).shape()[0], val(*w).shape()[1]);
                let rows = val(*x).rows();
                if wants(*x) {
                    let gx = slot(grads, *x, rows * cin);
                    T::gemm(rows, cout, cin, g, false, val(*w).data(), true, gx, true);
                }
                if wants(*w) {
                    let gw = slot(grads, *w, cin * cout);
                    T::gemm(cin, rows, cout, val(*x).data(), true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = slot(grads, *b, cout);
                        for row in g.chunks_exact(cout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x).data();
                let gx = slot(grads, *x, xv.len());
                for ((a, &v), &gv) in gx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *a = *a + gv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c.max(1);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] = sum_g[j] + grow[j];
                        sum_gx[j] = sum_gx[j] + grow[j] * hrow[j];
                    }
                }
                if wants(*shift) {
                    let gs = slot(grads, *shift, c);
                    for (a, &v) in gs.iter_mut().zip(&sum_g) {
                        *a = *a + v;
                    }
                }
                if wants(*scale) {
                    let gs = slot(grads, *scale, c);
                    for (a, &v) in gs.iter_mut().zip(&sum_gx) {
                        *a = *a + v;
                    }
                }
                if wants(*x) {
                    let gamma = val(*scale).data().to_vec();
                    let gx = slot(grads, *x, rows * c);
                    if *train {
                        // dx = γ·σ⁻¹/R · (R·dy − Σdy − x̂·Σ(dy·x̂))
                        let r = T::of(rows as f64);
                        let inv_r = T::one() / r;
                        for ((arow, grow), hrow) in gx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                        {
                            for j in 0..c {
                                let k = gamma[j] * inv_std[j] * inv_r;
                                arow[j] = arow[j] + k * (r * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                            }
                        }
                    } else {
                        for (arow, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                arow[j] = arow[j] + grow[j] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let (n, k, c) = {
                    let s = node.value.shape();
                    (s[0], s[1], s[2])
                };
                let y = node.value.data();
                let gx = slot(grads, *x, y.len());
                let mut dot = vec![T::zero(); c];
                for p in 0..n {
                    let range = p * k * c..(p + 1) * k * c;
                    let (yb, gb) = (&y[range.clone()], &g[range.clone()]);
                    dot.iter_mut().for_each(|d| *d = T::zero());
                    for (yr, gr) in yb.chunks_exact(c).zip(gb.chunks_exact(c)) {
                        for j in 0..c {
                            dot[j] = dot[j] + yr[j] * gr[j];
                        }
                    }
                    let ab = &mut gx[range];
                    for ((ar, yr), gr) in ab
                        .chunks_exact_mut(c)
                        .zip(yb.chunks_exact(c))
                        .zip(gb.chunks_exact(c))
                    {
                        for j in 0..c {
                            ar[j] = ar[j] + yr[j] * (gr[j] - dot[j]);
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (val(*a).channels(), val(*b).channels());
                let rows = val(*a).rows();
                if wants(*a) {
                    let ga = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        let src = &g[r * (ca + cb)..r * (ca + cb) + ca];
                        for (d, &s) in ga[r * ca..(r + 1) * ca].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        for (d, &s) in gb[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let c = node.value.channels();
                let (av, bv) = (val(*a).data(), val(*b).data());
                let (ka, kb) = match bcast {
                    Bcast::None => (1, 1),
                    Bcast::Lhs(k) => (*k, 1),
                    Bcast::Rhs(k) => (1, *k),
                };
                let rows = node.value.rows();
                if wants(*a) {
                    let ga = slot(grads, *a, av.len());
                    for r in 0..rows {
                        let (ar, br) = (r / ka, r / kb);
                        for j in 0..c {
                            let gv = g[r * c + j];
                            let d = match kind {
                                BinKind::Add | BinKind::Sub => gv,
                                BinKind::Mul => gv * bv[br * c + j],
                            };
                            ga[ar * c + j] = ga[ar * c + j] + d;
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for r in 0..rows {
                        let (ar, br) = (r / ka, r / kb);
                        for j in 0..c {
                            let gv = g[r * c + j];
                            let d = match kind {
                                BinKind::Add => gv,
                                BinKind::Sub => -gv,
                                BinKind::Mul => gv * av[ar * c + j],
                            };
                            gb[br * c + j] = gb[br * c + j] + d;
                        }
                    }
                }
            }
            Op::RepeatK { x, k } => {
                let c = node.value.channels();
                let n = val(*x).rows();
                let gx = slot(grads, *x, n * c);
                for p in 0..n {
                    for kk in 0..*k {
                        let src = &g[(p * k + kk) * c..(p * k + kk + 1) * c];
                        for (d, &s) in gx[p * c..(p + 1) * c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::SumK { x } | Op::MeanK { x } => {
                let s = val(*x).shape();
                let (n, k, c) = (s[0], s[1], s[2]);
                let scale = match node.op {
                    Op::MeanK { .. } => T::one() / T::of(k as f64),
                    _ => T::one(),
                };
                let gx = slot(grads, *x, n * k * c);
                for p in 0..n {
                    let src = &g[p * c..(p + 1) * c];
                    for kk in 0..k {
                        let dst = &mut gx[(p * k + kk) * c..(p * k + kk + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s * scale;
                        }
                    }
                }
            }
            Op::MaxK { x, arg } => {
                let s = val(*x).shape();
                let (n, k, c) = (s[0], s[1], s[2]);
                let gx = slot(grads, *x, n * k * c);
                for p in 0..n {
                    for j in 0..c {
                        let kk = arg[p * c + j] as usize;
                        let d = &mut gx[(p * k + kk) * c + j];
                        *d = *d + g[p * c + j];
                    }
                }
            }
            Op::Gather { src, idx } => {
                let c = node.value.channels();
                let len = val(*src).len();
                let gs = slot(grads, *src, len);
                for (r, &i) in idx.iter().enumerate() {
                    let i = i as usize;
                    for (d, &s) in gs[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d = *d + s;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, mask.len());
                for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d = *d + gv * m;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let gl = slot(grads, *logits, probs.len());
                for (r, (drow, prow)) in gl.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate() {
                    for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let onehot = if j == labels[r] as usize { T::one() } else { T::zero() };
                        *d = *d + (p - onehot) * scale;
                    }
                }
            }
            Op::SumAll { x } => {
                let len = val(*x).len();
                let gx = slot(grads, *x, len);
                gx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn reduce_k<T: Real>(x: &[T], n: usize, k: usize, c: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    for p in 0..n {
        let o = &mut out[p * c..(p + 1) * c];
        for kk in 0..k {
            let row = &x[(p * k + kk) * c..(p * k + kk + 1) * c];
            for (a, &v) in o.iter_mut().zip(row) {
                *a = f(*a, v);
            }
        }
    }
    out
}
