mod common;

use common::{oracle_residual, Mat};
use dlanet::autodiff::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use dlanet::dla::{
    raw_position_features, AttentivePooling, DlaConfig, DlaResidual, PePlacement, PeVariant, PoolMode, SaAggregate,
    SelfAttention, Switch,
};
use dlanet::geometry::{knn, NeighborIndex};
use dlanet::layers::{Ctx, Mode};
use dlanet::rng::Prng;

fn randomize(store: &mut ParamStore<f64>, rng: &mut Prng) {
    for p in store.iter_mut() {
        let positive = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if positive { rng.uniform(0.5, 2.0) } else { rng.uniform(-1.0, 1.0) };
        }
    }
}

fn random_points(n: usize, rng: &mut Prng) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()
}

fn random_mat(rows: usize, cols: usize, rng: &mut Prng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
}

fn to_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], m.iter().flatten().copied().collect()).unwrap()
}

fn run_block(store: &ParamStore<f64>, blk: &DlaResidual, f: &Mat, p: &[[f64; 3]], nb: &NeighborIndex, mode: Mode) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let x = ctx.tape.constant(to_tensor(f)).unwrap();
    let y = blk.forward(&mut ctx, x, p, nb).unwrap();
    tape.value(y).data().to_vec()
}

fn all_configs() -> Vec<DlaConfig> {
    let mut out = Vec::new();
    for &pe_variant in PeVariant::ALL {
        out.push(DlaConfig { pe_variant, ..Default::default() });
    }
    for &sa_pe_placement in PePlacement::ALL {
        out.push(DlaConfig { sa_pe_placement, ..Default::default() });
    }
    for &ap_mode in PoolMode::ALL {
        for &sa_aggregate in SaAggregate::ALL {
            out.push(DlaConfig { ap_mode, sa_aggregate, ..Default::default() });
        }
    }
    for (pe, sa) in [(Switch::Off, Switch::Off), (Switch::On, Switch::Off), (Switch::Off, Switch::On)] {
        out.push(DlaConfig { pe_bn: pe, sa_bn: sa, ..Default::default() });
    }
    out
}

#[test]
fn raw_features_examples() {
    let p = [[1.0, 2.0, 3.0], [1.0, 2.0, 7.0]];
    let nb = NeighborIndex { idx: vec![0, 1, 1, 0], n: 2, k: 2, level: 0 };
    let raw = raw_position_features(&p, &nb, PeVariant::RelativeDist).unwrap();
    assert_eq!(raw.shape(), &[2, 2, 4]);
    assert_eq!(&raw.data()[..8], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -4.0, 4.0]);
    let all = raw_position_features(&p, &nb, PeVariant::All).unwrap();
    assert_eq!(&all.data()[10..20], &[1.0, 2.0, 3.0, 1.0, 2.0, 7.0, 0.0, 0.0, -4.0, 4.0]);
    for v in PeVariant::ALL {
        assert_eq!(raw_position_features(&p, &nb, *v).unwrap().channels(), v.raw_width());
    }
}

#[test]
fn default_encoding_is_translation_invariant() {
    let mut rng = Prng::new(1);
    // dyadic coordinates keep the translated differences exact
    let p: Vec<[f64; 3]> = (0..40)
        .map(|_| [rng.below(64) as f64 / 8.0, rng.below(64) as f64 / 8.0, rng.below(64) as f64 / 8.0])
        .collect();
    let q: Vec<[f64; 3]> = p.iter().map(|v| [v[0] + 10.0, v[1] - 5.0, v[2] + 2.0]).collect();
    let nb = knn(&p, &p, 6).unwrap();
    assert_eq!(knn(&q, &q, 6).unwrap(), nb);
    let mut store = ParamStore::new();
    let blk = DlaResidual::new(&mut store, "b", 3, 8, &DlaConfig::default(), &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let mut outs = Vec::new();
    for pts in [&p, &q] {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let c = blk.pe.forward(&mut ctx, pts, &nb).unwrap();
        outs.push(tape.value(c).data().to_vec());
    }
    assert_eq!(outs[0], outs[1]);
}

fn unit_attention(store: &mut ParamStore<f64>, d: usize, rng: &mut Prng) -> SelfAttention {
    let cfg = DlaConfig { sa_bn: Switch::Off, ..Default::default() };
    let sa = SelfAttention::new(store, "sa", d, &cfg, rng).unwrap();
    for p in store.iter_mut() {
        let w = p.name.ends_with(".w");
        p.value.data_mut().iter_mut().for_each(|v| *v = if w { 1.0 } else { 0.0 });
    }
    sa
}

#[test]
fn self_attention_scalar_example() {
    let mut rng = Prng::new(0);
    let mut store = ParamStore::new();
    let sa = unit_attention(&mut store, 1, &mut rng);
    let nb = NeighborIndex { idx: vec![1, 2, 1, 1, 2, 2], n: 3, k: 2, level: 0 };
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let f = ctx.tape.constant(Tensor::from_f64(&[3, 1], &[1.0, 1.0, 3.0]).unwrap()).unwrap();
    let c = ctx.tape.constant(Tensor::zeros(&[3, 2, 1])).unwrap();
    let out = sa.forward(&mut ctx, f, c, &nb).unwrap();
    assert_eq!(tape.value(out.weights).data()[..2], [0.5, 0.5]);
    assert_eq!(tape.value(out.out).data()[0], 2.0);
}

#[test]
fn self_attention_single_and_identical_neighbors() {
    let mut rng = Prng::new(3);
    let d = 3;
    let mut store = ParamStore::new();
    let cfg = DlaConfig { sa_bn: Switch::Off, ..Default::default() };
    let sa = SelfAttention::new(&mut store, "sa", d, &cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let fv = random_mat(4, d, &mut rng);
    let cv = random_mat(4, d, &mut rng);
    let gamma = |x: &[f64]| common::dense(&store, &sa.gamma, x);

    // K = 1: output is γ(f_1) + c_1
    let nb1 = NeighborIndex { idx: vec![2, 0, 3, 1], n: 4, k: 1, level: 0 };
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let f = ctx.tape.constant(to_tensor(&fv)).unwrap();
    let c = ctx.tape.constant(to_tensor(&cv).reshape(&[4, 1, d]).unwrap()).unwrap();
    let out = sa.forward(&mut ctx, f, c, &nb1).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
    for i in 0..4 {
        let g = gamma(&fv[nb1.idx[i] as usize]);
        for q in 0..d {
            assert!((tape.value(out.out).data()[i * d + q] - (g[q] + cv[i][q])).abs() < 1e-14);
        }
    }

    // every neighbour identical in feature and encoding
    let nb = NeighborIndex { idx: vec![1; 12], n: 4, k: 3, level: 0 };
    let crow: Vec<f64> = cv[0].clone();
    let c3: Vec<f64> = (0..12).flat_map(|_| crow.clone()).collect();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let f = ctx.tape.constant(to_tensor(&fv)).unwrap();
    let c = ctx.tape.constant(Tensor::new(vec![4, 3, d], c3).unwrap()).unwrap();
    let out = sa.forward(&mut ctx, f, c, &nb).unwrap();
    let g = gamma(&fv[1]);
    for i in 0..4 {
        for q in 0..d {
            assert!((tape.value(out.out).data()[i * d + q] - (g[q] + crow[q])).abs() < 1e-14);
        }
    }
}

fn pool(store: &ParamStore<f64>, ap: &AttentivePooling, f: &Tensor<f64>, c: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let fv = ctx.tape.constant(f.clone()).unwrap();
    let cv = ctx.tape.constant(c.clone()).unwrap();
    let out = ap.forward(&mut ctx, fv, cv).unwrap().out;
    tape.value(out).data().to_vec()
}

#[test]
fn pooling_degenerate_equivalences() {
    let mut rng = Prng::new(5);
    let (n, k, d) = (6, 5, 3);
    let mut store = ParamStore::new();
    let att = AttentivePooling::new(&mut store, "att", d, PoolMode::Attentive, &mut rng).unwrap();
    let avg = AttentivePooling::new(&mut store, "avg", d, PoolMode::Avg, &mut rng).unwrap();
    let max = AttentivePooling::new(&mut store, "max", d, PoolMode::Max, &mut rng).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let f = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let fk = Tensor::new(vec![n, k, d], (0..n * k * d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let c = Tensor::new(vec![n, k, d], (0..n * k * d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    assert_eq!(pool(&store, &att, &f, &c), pool(&store, &avg, &f, &c));
    assert_eq!(pool(&store, &att, &fk, &c), pool(&store, &avg, &fk, &c));

    randomize(&mut store, &mut rng);
    let c1 = Tensor::new(vec![n, 1, d], c.data()[..n * d].to_vec()).unwrap();
    let a = pool(&store, &att, &f, &c1);
    assert_eq!(a, pool(&store, &avg, &f, &c1));
    assert_eq!(a, pool(&store, &max, &f, &c1));

    // d = 1, K = 2, F broadcast as 2, c = 0
    let mut s1 = ParamStore::new();
    let ap1 = AttentivePooling::new(&mut s1, "a", 1, PoolMode::Attentive, &mut rng).unwrap();
    let out = pool(&s1, &ap1, &Tensor::from_f64(&[1, 1], &[2.0]).unwrap(), &Tensor::zeros(&[1, 2, 1]));
    assert_eq!(out, vec![2.0, 0.0]);
}

#[test]
fn dead_main_path_leaves_relu_of_skip() {
    let mut rng = Prng::new(6);
    let (n, cin, dout) = (10, 3, 8);
    let mut store = ParamStore::new();
    let blk = DlaResidual::new(&mut store, "b", cin, dout, &DlaConfig::default(), &mut rng).unwrap();
    for p in store.iter_mut() {
        if p.trainable {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let skip = blk.skip.as_ref().unwrap().w;
    for i in 0..cin {
        store.value_mut(skip).data_mut()[i * dout + i] = 1.0;
    }
    let p = random_points(n, &mut rng);
    let nb = knn(&p, &p, 4).unwrap();
    let f = random_mat(n, cin, &mut rng);
    let out = run_block(&store, &blk, &f, &p, &nb, Mode::Train);
    for i in 0..n {
        for q in 0..dout {
            let want = if q < cin { f[i][q].max(0.0) } else { 0.0 };
            assert_eq!(out[i * dout + q], want);
        }
    }
}

#[test]
fn matches_straight_line_oracle() {
    let mut rng = Prng::new(7);
    for (t, cfg) in all_configs().into_iter().enumerate() {
        for rep in 0..4 {
            let n = 2 + rng.below(7);
            let k = 1 + rng.below(4.min(n));
            let d_out = 2 * (1 + rng.below(4));
            let cin = if rep == 0 { d_out } else { 1 + rng.below(5) };
            let mut store = ParamStore::new();
            let blk = DlaResidual::new(&mut store, "b", cin, d_out, &cfg, &mut rng).unwrap();
            randomize(&mut store, &mut rng);
            let p = random_points(n, &mut rng);
            let nb = knn(&p, &p, k).unwrap();
            let f = random_mat(n, cin, &mut rng);
            for (mode, train) in [(Mode::Train, true), (Mode::Eval, false)] {
                let got = run_block(&store, &blk, &f, &p, &nb, mode);
                let want: Vec<f64> = oracle_residual(&store, &blk, &f, &p, &nb, train).concat();
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-10, "config {t} ({cfg:?}) n={n} k={k}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn neighbor_permutation_invariance() {
    let mut rng = Prng::new(8);
    let (n, k, cin, dout) = (12, 6, 4, 6);
    for &sa_aggregate in SaAggregate::ALL {
        let cfg = DlaConfig { sa_aggregate, ..Default::default() };
        let mut store = ParamStore::new();
        let blk = DlaResidual::new(&mut store, "b", cin, dout, &cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let p = random_points(n, &mut rng);
        let nb = knn(&p, &p, k).unwrap();
        let f = random_mat(n, cin, &mut rng);
        let base = run_block(&store, &blk, &f, &p, &nb, Mode::Train);
        for _ in 0..20 {
            let mut perm = nb.clone();
            for row in perm.idx.chunks_mut(k) {
                rng.shuffle(row);
            }
            let out = run_block(&store, &blk, &f, &p, &perm, Mode::Train);
            for (a, b) in base.iter().zip(&out) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_weights_are_distributions() {
    let mut rng = Prng::new(9);
    for _ in 0..50 {
        let (n, k, d) = (2 + rng.below(8), 1 + rng.below(6), 1 + rng.below(5));
        let k = k.min(n);
        let mut store = ParamStore::new();
        let cfg = DlaConfig::default();
        let sa = SelfAttention::new(&mut store, "sa", d, &cfg, &mut rng).unwrap();
        let ap = AttentivePooling::new(&mut store, "ap", d, PoolMode::Attentive, &mut rng).unwrap();
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-5.0, 5.0));
        }
        let p = random_points(n, &mut rng);
        let nb = knn(&p, &p, k).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let f = ctx.tape.constant(to_tensor(&random_mat(n, d, &mut rng))).unwrap();
        let c = ctx.tape.constant(Tensor::new(vec![n, k, d], (0..n * k * d).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap()).unwrap();
        let s = sa.forward(&mut ctx, f, c, &nb).unwrap();
        let a = ap.forward(&mut ctx, s.out, c).unwrap();
        for (w, width) in [(s.weights, d), (a.scores.unwrap(), 2 * d)] {
            let v = tape.value(w).data();
            for i in 0..n {
                for q in 0..width {
                    let col: Vec<f64> = (0..k).map(|kk| v[(i * k + kk) * width + q]).collect();
                    assert!(col.iter().all(|&x| x >= 0.0));
                    assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn residual_gradients_match_finite_differences() {
    let mut rng = Prng::new(10);
    for cfg in [DlaConfig::default(), DlaConfig { sa_aggregate: SaAggregate::PerNeighbor, ap_mode: PoolMode::Max, ..Default::default() }] {
        let (n, k, cin, dout) = (10, 4, 3, 6);
        let mut store = ParamStore::new();
        let blk = DlaResidual::new(&mut store, "b", cin, dout, &cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let p = random_points(n, &mut rng);
        let nb = knn(&p, &p, k).unwrap();
        let f = to_tensor(&random_mat(n, cin, &mut rng));
        let w = Tensor::new(vec![n, dout], (0..n * dout).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let report = grad_check(
            &mut store,
            |tape, s| -> dlanet::Result<Var> {
                let mut ctx = Ctx::new(tape, s, Mode::Train);
                let x = ctx.tape.constant(f.clone())?;
                let y = blk.forward(&mut ctx, x, &p, &nb)?;
                let wv = ctx.tape.constant(w.clone())?;
                let prod = ctx.tape.mul(y, wv)?;
                ctx.tape.sum_all(prod)
            },
            GradCheckOptions { zero_tol: 1e-8, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{cfg:?}: {report:?}");
        assert!(report.max_zero_abs_error < 1e-8, "{report:?}");
    }
}
