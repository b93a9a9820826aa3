//! Straight-line reference evaluations used as test oracles.
#![allow(dead_code)]

use dlanet::autodiff::ParamStore;
use dlanet::dla::{DlaResidual, PePlacement, PeVariant, PoolMode, SaAggregate};
use dlanet::geometry::NeighborIndex;
use dlanet::layers::{BatchNorm, Linear};

pub type Mat = Vec<Vec<f64>>;

fn weights(store: &ParamStore<f64>, l: &Linear) -> (Mat, Vec<f64>) {
    let w = store.value(l.w);
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let m = (0..r).map(|i| w.data()[i * c..(i + 1) * c].to_vec()).collect();
    let b = l.b.map(|b| store.value(b).data().to_vec()).unwrap_or_else(|| vec![0.0; c]);
    (m, b)
}

pub fn dense(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = weights(store, l);
    (0..b.len())
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>() + b[j])
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// BN (batch statistics when `train`, running statistics otherwise) then ReLU,
/// over a list of rows.
pub fn bn_relu_rows(store: &ParamStore<f64>, bn: &BatchNorm, rows: &mut [Vec<f64>], train: bool) {
    let c = rows[0].len();
    let g = store.value(bn.scale).data();
    let s = store.value(bn.shift).data();
    for j in 0..c {
        let (mean, var) = if train {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            (m, v)
        } else {
            (store.value(bn.running_mean).data()[j], store.value(bn.running_var).data()[j])
        };
        for r in rows.iter_mut() {
            r[j] = (g[j] * (r[j] - mean) / (var + 1e-5).sqrt() + s[j]).max(0.0);
        }
    }
}

pub fn raw_pe(p: &[[f64; 3]], i: usize, j: usize, v: PeVariant) -> Vec<f64> {
    let rel: Vec<f64> = (0..3).map(|a| p[i][a] - p[j][a]).collect();
    let dist = rel.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::new();
    match v {
        PeVariant::NeighborOnly => out.extend(p[j]),
        PeVariant::RelativeOnly => out.extend(&rel),
        PeVariant::RelativeDist => {
            out.extend(&rel);
            out.push(dist);
        }
        PeVariant::CenterRelativeDist => {
            out.extend(p[i]);
            out.extend(&rel);
            out.push(dist);
        }
        PeVariant::NeighborRelativeDist => {
            out.extend(p[j]);
            out.extend(&rel);
            out.push(dist);
        }
        PeVariant::All => {
            out.extend(p[i]);
            out.extend(p[j]);
            out.extend(&rel);
            out.push(dist);
        }
    }
    out
}

fn softmax_columns(rows: &[Vec<f64>]) -> Mat {
    let c = rows[0].len();
    let mut out = rows.to_vec();
    for j in 0..c {
        let m = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = rows.iter().map(|r| (r[j] - m).exp()).sum();
        for (o, r) in out.iter_mut().zip(rows) {
            o[j] = (r[j] - m).exp() / z;
        }
    }
    out
}

/// Position encoding rows, indexed `[i][k]`.
pub fn oracle_pe(store: &ParamStore<f64>, blk: &DlaResidual, p: &[[f64; 3]], nb: &NeighborIndex, train: bool) -> Vec<Mat> {
    let mut flat: Vec<Vec<f64>> = Vec::new();
    for i in 0..nb.n {
        for &j in nb.row(i) {
            let raw = raw_pe(p, i, j as usize, blk.pe.variant);
            let h = relu(dense(store, &blk.pe.l1, &raw));
            flat.push(dense(store, &blk.pe.l2, &h));
        }
    }
    if let Some(bn) = &blk.pe.bn {
        bn_relu_rows(store, bn, &mut flat, train);
    }
    flat.chunks(nb.k).map(|c| c.to_vec()).collect()
}

/// Self-attention output per point: one row (sum) or K rows (per neighbour).
pub fn oracle_sa(store: &ParamStore<f64>, blk: &DlaResidual, x: &Mat, c: &[Mat], nb: &NeighborIndex, train: bool) -> Vec<Mat> {
    let sa = &blk.sa;
    let a: Mat = x.iter().map(|r| dense(store, &sa.alpha, r)).collect();
    let b: Mat = x.iter().map(|r| dense(store, &sa.beta, r)).collect();
    let g: Mat = x.iter().map(|r| dense(store, &sa.gamma, r)).collect();
    let d = a[0].len();
    let mut out: Vec<Mat> = Vec::new();
    for i in 0..nb.n {
        let row = nb.row(i);
        let logits: Mat = row
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                let rel: Vec<f64> = (0..d)
                    .map(|q| {
                        let mut v = a[i][q] - b[j as usize][q];
                        if matches!(sa.placement, PePlacement::Both | PePlacement::MappingOnly) {
                            v += c[i][k][q];
                        }
                        v
                    })
                    .collect();
                dense(store, &sa.eta2, &relu(dense(store, &sa.eta1, &rel)))
            })
            .collect();
        let w = softmax_columns(&logits);
        let vals: Mat = row
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                (0..d)
                    .map(|q| {
                        let v = g[j as usize][q]
                            + if matches!(sa.placement, PePlacement::Both | PePlacement::ValuesOnly) { c[i][k][q] } else { 0.0 };
                        w[k][q] * v
                    })
                    .collect()
            })
            .collect();
        out.push(match sa.aggregate {
            SaAggregate::Sum => vec![(0..d).map(|q| vals.iter().map(|v| v[q]).sum()).collect()],
            SaAggregate::PerNeighbor => vals,
        });
    }
    if let Some(bn) = &sa.bn {
        let mut flat: Mat = out.iter().flatten().cloned().collect();
        bn_relu_rows(store, bn, &mut flat, train);
        let per = out[0].len();
        out = flat.chunks(per).map(|c| c.to_vec()).collect();
    }
    out
}

pub fn oracle_ap(store: &ParamStore<f64>, blk: &DlaResidual, f: &[Mat], c: &[Mat]) -> Mat {
    let mode = blk.ap.mode;
    let k = c[0].len();
    f.iter()
        .zip(c)
        .map(|(fi, ci)| {
            let f_at = |kk: usize| if fi.len() == 1 { &fi[0] } else { &fi[kk] };
            if mode == PoolMode::Passthrough {
                let d = fi[0].len();
                return (0..d).map(|q| fi.iter().map(|r| r[q]).sum::<f64>() / fi.len() as f64).collect();
            }
            let hat: Mat = (0..k)
                .map(|kk| {
                    let mut v = f_at(kk).clone();
                    if mode != PoolMode::NoPe {
                        v.extend(&ci[kk]);
                    }
                    v
                })
                .collect();
            let w = hat[0].len();
            match mode {
                PoolMode::Max => (0..w).map(|q| hat.iter().map(|r| r[q]).fold(f64::NEG_INFINITY, f64::max)).collect(),
                PoolMode::Avg => (0..w).map(|q| hat.iter().map(|r| r[q]).sum::<f64>() / k as f64).collect(),
                _ => {
                    let score = blk.ap.score.as_ref().unwrap();
                    let s = softmax_columns(&hat.iter().map(|h| dense(store, score, h)).collect::<Vec<_>>());
                    (0..w).map(|q| (0..k).map(|kk| s[kk][q] * hat[kk][q]).sum()).collect()
                }
            }
        })
        .collect()
}

/// Full residual unit, evaluated point by point.
pub fn oracle_residual(
    store: &ParamStore<f64>,
    blk: &DlaResidual,
    features: &Mat,
    p: &[[f64; 3]],
    nb: &NeighborIndex,
    train: bool,
) -> Mat {
    let x: Mat = features.iter().map(|r| dense(store, &blk.in_proj, r)).collect();
    let c = oracle_pe(store, blk, p, nb, train);
    let f = oracle_sa(store, blk, &x, &c, nb, train);
    let pooled = oracle_ap(store, blk, &f, &c);
    pooled
        .iter()
        .zip(features)
        .map(|(pr, fr)| {
            let main = dense(store, &blk.post, pr);
            let skip = match &blk.skip {
                Some(s) => dense(store, s, fr),
                None => fr.clone(),
            };
            main.iter().zip(&skip).map(|(m, s)| (m + s).max(0.0)).collect()
        })
        .collect()
}
