//! Numerical verification suite shared by `dlanet selftest` and the
//! acceptance tests. Every check is deterministic for its seed and returns
//! an [`Outcome`] instead of panicking.

use std::time::Instant;

use dlanet::autodiff::gradcheck::{analytic_gradients, grad_check_against};
use dlanet::autodiff::{GradCheckOptions, GradCheckReport, ParamId, ParamStore, Probe, Tape, Tensor, Var};
use dlanet::dla::{AttentivePooling, DlaConfig, DlaResidual, PoolMode, PositionEncoding, SaAggregate, SelfAttention};
use dlanet::evaluation::ConfusionMatrix;
use dlanet::geometry::{knn, NeighborIndex, PointCloud};
use dlanet::layers::{Ctx, Mode};
use dlanet::network::{build_pyramid, input_features, DlaNet, DlaNetConfig};
use dlanet::rng::Prng;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({}; {:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Runs `f` and times it; an `Err` becomes a failed outcome.
pub fn timed(name: &str, f: impl FnOnce() -> dlanet::Result<(bool, String)>) -> Outcome {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome { name: name.to_string(), passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values of magnitude in [0.1, 1] with random sign, clear of relu/max kinks.
fn signed_tensor(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_points(n: usize, rng: &mut Prng) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()
}

/// Trainable weights uniform in [-1, 1], running variances in [0.5, 2].
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut Prng) {
    for p in store.iter_mut() {
        let positive = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if positive { rng.uniform(0.5, 2.0) } else { rng.uniform(-1.0, 1.0) };
        }
    }
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> dlanet::Result<Var>>;

/// Gradient check of `graph` whose inputs are the store's parameters in
/// order. With `corrupt` the first analytic coordinate is scaled by 1.01
/// before comparison, which a working checker must flag.
fn check_graph(
    store: &mut ParamStore<f64>,
    graph: &Graph,
    opts: GradCheckOptions,
    corrupt: bool,
) -> dlanet::Result<GradCheckReport> {
    let n = store.len();
    let mut f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let vars = (0..n).map(|i| tape.param(s, ParamId(i))).collect::<dlanet::Result<Vec<_>>>()?;
        graph(tape, &vars)
    };
    let mut analytic = analytic_gradients(store, &mut f)?;
    if corrupt {
        if let Some(g) = analytic.iter_mut().find(|g| g.data().iter().any(|v| v.abs() > 1e-6)) {
            let i = g.data().iter().position(|v| v.abs() > 1e-6).unwrap();
            g.data_mut()[i] *= 1.01;
        }
    }
    grad_check_against(store, f, &analytic, opts)
}

/// Weighted sum `Σ w ⊙ y` with a fixed random `w`, turning any tensor into a
/// scalar objective whose gradient reaches every element.
fn probe_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> dlanet::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = uniform_tensor(&shape, -1.0, 1.0, &mut Prng::new(seed));
    let c = tape.constant(w)?;
    let p = tape.mul(y, c)?;
    tape.sum_all(p)
}

/// One gradient check per primitive, each < `tol` relative error.
pub fn op_gradients(tol: f64, corrupt: bool) -> Outcome {
    timed("op gradients", || {
        let (n, k, d) = (3, 4, 5);
        type Case = (&'static str, Vec<Vec<usize>>, Graph);
        let nkd = vec![n, k, d];
        let nd = vec![n, d];
        let cases: Vec<Case> = vec![
            ("linear", vec![vec![n, k, 3], vec![3, d], vec![d]], Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe_sum(t, y, 1)
            })),
            ("relu", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.relu(v[0])?;
                probe_sum(t, y, 2)
            })),
            ("batch_norm_train", vec![vec![6, d], vec![d], vec![d]], Box::new(|t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                probe_sum(t, y, 3)
            })),
            ("batch_norm_eval", vec![vec![6, d], vec![d], vec![d]], Box::new(|t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0, 0.5], &[0.5, 1.5, 2.0, 1.0, 0.7])?;
                probe_sum(t, y, 4)
            })),
            ("softmax_over_neighbors", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.softmax_over_neighbors(v[0])?;
                probe_sum(t, y, 5)
            })),
            ("concat_channels", vec![nkd.clone(), vec![n, k, 2]], Box::new(|t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                probe_sum(t, y, 6)
            })),
            ("add (broadcast)", vec![nkd.clone(), nd.clone()], Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe_sum(t, y, 7)
            })),
            ("sub (broadcast)", vec![nd.clone(), nkd.clone()], Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe_sum(t, y, 8)
            })),
            ("mul (broadcast)", vec![nkd.clone(), vec![n, 1, d]], Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe_sum(t, y, 9)
            })),
            ("repeat_over_neighbors", vec![nd.clone()], Box::new(move |t, v| {
                let y = t.repeat_over_neighbors(v[0], k)?;
                probe_sum(t, y, 10)
            })),
            ("sum_over_neighbors", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.sum_over_neighbors(v[0])?;
                probe_sum(t, y, 11)
            })),
            ("mean_over_neighbors", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.mean_over_neighbors(v[0])?;
                probe_sum(t, y, 12)
            })),
            ("max_over_neighbors", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.max_over_neighbors(v[0])?;
                probe_sum(t, y, 13)
            })),
            ("gather_rows", vec![nd.clone()], Box::new(move |t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 0, 1, 2, 2, 1, 0], &[2, 4])?;
                probe_sum(t, y, 14)
            })),
            ("dropout", vec![nkd.clone()], Box::new(|t, v| {
                let y = t.dropout(v[0], 0.5, true, &mut Prng::new(15))?;
                probe_sum(t, y, 15)
            })),
            ("cross_entropy", vec![vec![4, 8]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 7, 3, 3]))),
        ];
        let mut rng = Prng::new(2024);
        let mut worst = (0.0f64, "");
        let mut checked = 0;
        for (i, (name, shapes, graph)) in cases.iter().enumerate() {
            let mut store = ParamStore::new();
            for (j, s) in shapes.iter().enumerate() {
                store.add(&format!("in{j}"), signed_tensor(s, &mut rng))?;
            }
            // only the first op is corrupted, so a corrupted run must fail
            let r = check_graph(&mut store, graph, GradCheckOptions::default(), corrupt && i == 0)?;
            checked += r.checked;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, name);
            }
        }
        Ok((
            worst.0 < tol,
            format!("{} ops, {checked} coordinates, worst {:.2e} in {}", cases.len(), worst.0, worst.1),
        ))
    })
}

/// The composed residual unit for the default and two ablated configs.
pub fn residual_gradients(tol: f64) -> Outcome {
    timed("dla_residual gradients", || {
        let mut rng = Prng::new(10);
        let configs = [
            DlaConfig::default(),
            DlaConfig { sa_aggregate: SaAggregate::PerNeighbor, ap_mode: PoolMode::Max, ..Default::default() },
            DlaConfig { ap_mode: PoolMode::NoPe, ..Default::default() },
        ];
        let mut worst = 0.0f64;
        let mut zero = 0.0f64;
        for cfg in configs {
            let (n, k, cin, dout) = (10, 4, 3, 6);
            let mut store = ParamStore::new();
            let blk = DlaResidual::new(&mut store, "b", cin, dout, &cfg, &mut rng)?;
            randomize(&mut store, &mut rng);
            let p = random_points(n, &mut rng);
            let nb = knn(&p, &p, k)?;
            let f = uniform_tensor(&[n, cin], -1.0, 1.0, &mut rng);
            let w = uniform_tensor(&[n, dout], -1.0, 1.0, &mut rng);
            let analytic;
            let mut obj = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> dlanet::Result<Var> {
                let mut ctx = Ctx::new(tape, s, Mode::Train);
                let x = ctx.tape.constant(f.clone())?;
                let y = blk.forward(&mut ctx, x, &p, &nb)?;
                let wv = ctx.tape.constant(w.clone())?;
                let prod = ctx.tape.mul(y, wv)?;
                ctx.tape.sum_all(prod)
            };
            analytic = analytic_gradients(&store, &mut obj)?;
            let r = grad_check_against(&mut store, obj, &analytic, GradCheckOptions { zero_tol: 1e-8, ..Default::default() })?;
            worst = worst.max(r.max_rel_error);
            zero = zero.max(r.max_zero_abs_error);
        }
        Ok((worst < tol && zero < 1e-8, format!("3 configs, worst relative {worst:.2e}, structural-zero abs {zero:.1e}")))
    })
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = Prng::new(seed);
    let positions = (0..n).map(|_| [rng.uniform(0.0, 4.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 3.0)]).collect();
    let colors = (0..n).map(|_| [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]).collect();
    let labels = (0..n).map(|_| rng.below(8) as u8).collect();
    PointCloud::new(positions, Some(colors), Some(labels)).unwrap()
}

/// Whole network on an `n_points` cloud with cross-entropy loss, sampling
/// `per_tensor` coordinates of every parameter. Biases are jittered off zero
/// so self-neighbour rows do not sit exactly on ReLU kinks; coordinates
/// whose stencil still straddles a kink are detected and counted apart.
/// Gradients below 1e-6 must agree within 1e-9 absolute instead of
/// relatively, since the central difference resolves only ~1e-10 there.
pub fn network_gradients(n_points: usize, per_tensor: usize, tol: f64) -> Outcome {
    timed("full network gradients", || {
        let cfg = DlaNetConfig::default();
        let (net, mut store) = DlaNet::init::<f64>(&cfg, 11)?;
        let mut jitter = Prng::new(16);
        for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = jitter.uniform(-0.1, 0.1));
        }
        let cloud = random_cloud(n_points, 12);
        let pyr = build_pyramid(&cloud.positions, &cfg, &mut Prng::new(13))?;
        let feats = input_features(&cloud, true)?;
        let labels: Vec<u32> = cloud.labels.as_ref().unwrap().iter().map(|&l| l as u32).collect();
        let mut obj = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> dlanet::Result<Var> {
            let mut ctx = Ctx::new(tape, s, Mode::Train);
            let logits = net.forward(&mut ctx, &feats, &pyr, &mut Prng::new(14))?;
            ctx.tape.cross_entropy(logits, &labels)
        };
        let analytic = analytic_gradients(&store, &mut obj)?;
        let r = grad_check_against(
            &mut store,
            obj,
            &analytic,
            GradCheckOptions {
                eps: 1e-5,
                probe: Probe::Sample { per_tensor, seed: 15 },
                zero_tol: 1e-6,
                detect_kinks: true,
            },
        )?;
        let ok = r.max_rel_error < tol && r.max_zero_abs_error < 1e-9 && r.kinks * 20 < r.checked.max(1);
        Ok((
            ok,
            format!(
                "{n_points} points, {} coordinates, worst {:.2e}{}, {} below 1e-6 (max abs {:.1e}), {} kink crossings",
                r.checked,
                r.max_rel_error,
                r.worst.as_ref().map_or(String::new(), |(name, i, a, n)| format!(" at {name}[{i}] ({a:.3e} vs {n:.3e})")),
                r.structural_zeros,
                r.max_zero_abs_error,
                r.kinks
            ),
        ))
    })
}

/// Self-attention and attentive-pooling weights over `instances` random
/// problems: nonnegative and summing to one over k for every channel.
pub fn attention_normalization(instances: usize) -> Outcome {
    timed("attention weights are distributions", || {
        let mut rng = Prng::new(9);
        let mut worst = 0.0f64;
        let mut negative = 0usize;
        for _ in 0..instances {
            let n = 2 + rng.below(8);
            let k = (1 + rng.below(6)).min(n);
            let d = 1 + rng.below(5);
            let mut store = ParamStore::new();
            let cfg = DlaConfig::default();
            let sa = SelfAttention::new(&mut store, "sa", d, &cfg, &mut rng)?;
            let ap = AttentivePooling::new(&mut store, "ap", d, PoolMode::Attentive, &mut rng)?;
            for p in store.iter_mut().filter(|p| p.trainable) {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-5.0, 5.0));
            }
            let p = random_points(n, &mut rng);
            let nb = knn(&p, &p, k)?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
            let f = ctx.tape.constant(uniform_tensor(&[n, d], -1.0, 1.0, &mut rng))?;
            let c = ctx.tape.constant(uniform_tensor(&[n, k, d], -3.0, 3.0, &mut rng))?;
            let s = sa.forward(&mut ctx, f, c, &nb)?;
            let a = ap.forward(&mut ctx, s.out, c)?;
            let scores = a.scores.expect("attentive mode yields scores");
            for (w, width) in [(s.weights, d), (scores, 2 * d)] {
                let v = tape.value(w).data();
                for i in 0..n {
                    for q in 0..width {
                        let mut sum = 0.0;
                        for kk in 0..k {
                            let x = v[(i * k + kk) * width + q];
                            negative += (x < 0.0) as usize;
                            sum += x;
                        }
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
            }
        }
        Ok((worst < 1e-6 && negative == 0, format!("{instances} instances, max |Σ−1| {worst:.1e}, {negative} negative")))
    })
}

struct AttentionParts {
    store: ParamStore<f64>,
    pe: PositionEncoding,
    sa: SelfAttention,
    ap: AttentivePooling,
}

fn attention_parts(cfg: &DlaConfig, d: usize, rng: &mut Prng) -> dlanet::Result<AttentionParts> {
    let mut store = ParamStore::new();
    let pe = PositionEncoding::new(&mut store, "pe", d, cfg.pe_variant, cfg.pe_bn.is_on(), rng)?;
    let sa = SelfAttention::new(&mut store, "sa", d, cfg, rng)?;
    let ap = AttentivePooling::new(&mut store, "ap", d, cfg.ap_mode, rng)?;
    randomize(&mut store, rng);
    Ok(AttentionParts { store, pe, sa, ap })
}

/// Self-attention output (when aggregated over k) and pooled output.
fn attention_outputs(
    parts: &AttentionParts,
    x: &Tensor<f64>,
    p: &[[f64; 3]],
    nb: &NeighborIndex,
) -> dlanet::Result<(Option<Vec<f64>>, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &parts.store, Mode::Train);
    let xv = ctx.tape.constant(x.clone())?;
    let c = parts.pe.forward(&mut ctx, p, nb)?;
    let s = parts.sa.forward(&mut ctx, xv, c, nb)?;
    let a = parts.ap.forward(&mut ctx, s.out, c)?;
    let sa_out = (tape.shape(s.out).len() == 2).then(|| tape.value(s.out).data().to_vec());
    Ok((sa_out, tape.value(a.out).data().to_vec()))
}

/// Outputs under `permutations` random reorderings of every neighbour list.
pub fn permutation_invariance(permutations: usize) -> Outcome {
    timed("neighbour-order permutation invariance", || {
        let mut rng = Prng::new(8);
        let (n, k, d) = (12, 6, 4);
        let configs = [
            DlaConfig::default(),
            DlaConfig { sa_aggregate: SaAggregate::PerNeighbor, ..Default::default() },
            DlaConfig { ap_mode: PoolMode::Max, ..Default::default() },
        ];
        let mut worst = 0.0f64;
        let per_config = permutations.div_ceil(configs.len());
        for cfg in &configs {
            let parts = attention_parts(cfg, d, &mut rng)?;
            let p = random_points(n, &mut rng);
            let nb = knn(&p, &p, k)?;
            let x = uniform_tensor(&[n, d], -1.0, 1.0, &mut rng);
            let (base_sa, base_ap) = attention_outputs(&parts, &x, &p, &nb)?;
            for _ in 0..per_config {
                let mut perm = nb.clone();
                for row in perm.idx.chunks_mut(k) {
                    rng.shuffle(row);
                }
                let (sa, ap) = attention_outputs(&parts, &x, &p, &perm)?;
                if let (Some(a), Some(b)) = (&base_sa, &sa) {
                    worst = a.iter().zip(b).fold(worst, |m, (x, y)| m.max((x - y).abs()));
                }
                worst = base_ap.iter().zip(&ap).fold(worst, |m, (x, y)| m.max((x - y).abs()));
            }
        }
        Ok((worst < 1e-12, format!("{} permutations, max deviation {worst:.1e}", per_config * configs.len())))
    })
}

/// Zero-score attentive pooling equals average pooling bit for bit, and with
/// K = 1 attentive, max and average pooling coincide.
pub fn degenerate_pooling() -> Outcome {
    timed("degenerate pooling equivalences", || {
        let mut rng = Prng::new(5);
        let mut failures = Vec::new();
        for trial in 0..20 {
            let (n, k, d) = (1 + rng.below(8), 1 + rng.below(6), 1 + rng.below(5));
            let mut store = ParamStore::new();
            let att = AttentivePooling::new(&mut store, "att", d, PoolMode::Attentive, &mut rng)?;
            let avg = AttentivePooling::new(&mut store, "avg", d, PoolMode::Avg, &mut rng)?;
            let max = AttentivePooling::new(&mut store, "max", d, PoolMode::Max, &mut rng)?;
            let pool = |store: &ParamStore<f64>, ap: &AttentivePooling, f: &Tensor<f64>, c: &Tensor<f64>| {
                let mut tape = Tape::new();
                let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
                let fv = ctx.tape.constant(f.clone())?;
                let cv = ctx.tape.constant(c.clone())?;
                let out = ap.forward(&mut ctx, fv, cv)?.out;
                Ok::<_, dlanet::Error>(tape.value(out).data().to_vec())
            };
            for p in store.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let f = uniform_tensor(&[n, d], -1.0, 1.0, &mut rng);
            let fk = uniform_tensor(&[n, k, d], -1.0, 1.0, &mut rng);
            let c = uniform_tensor(&[n, k, d], -1.0, 1.0, &mut rng);
            if pool(&store, &att, &f, &c)? != pool(&store, &avg, &f, &c)?
                || pool(&store, &att, &fk, &c)? != pool(&store, &avg, &fk, &c)?
            {
                failures.push(format!("zero-score trial {trial}"));
            }
            randomize(&mut store, &mut rng);
            let c1 = uniform_tensor(&[n, 1, d], -1.0, 1.0, &mut rng);
            let a = pool(&store, &att, &f, &c1)?;
            if a != pool(&store, &avg, &f, &c1)? || a != pool(&store, &max, &f, &c1)? {
                failures.push(format!("K=1 trial {trial}"));
            }
        }
        Ok((failures.is_empty(), if failures.is_empty() { "20 trials, bitwise equal".into() } else { failures.join(", ") }))
    })
}

/// Reference KNN: sort by (distance², index), self first when query and
/// support are the same set.
pub fn brute_knn(query: &[[f64; 3]], support: &[[f64; 3]], k: usize, same: bool) -> Vec<u32> {
    let mut out = Vec::with_capacity(query.len() * k);
    for (i, q) in query.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = support
            .iter()
            .enumerate()
            .map(|(j, s)| ((q[0] - s[0]).powi(2) + (q[1] - s[1]).powi(2) + (q[2] - s[2]).powi(2), j))
            .collect();
        all.sort_by(|a, b| {
            let (sa, sb) = (same && a.1 == i, same && b.1 == i);
            sb.cmp(&sa).then(a.partial_cmp(b).unwrap())
        });
        out.extend(all[..k].iter().map(|e| e.1 as u32));
    }
    out
}

/// `cases` random KNN problems with up to 2000 support points; every third
/// case sits on an integer lattice so many distances tie exactly.
pub fn knn_exactness(cases: usize) -> Outcome {
    timed("knn equals brute force", || {
        let mut rng = Prng::new(100);
        let mut mismatches = Vec::new();
        for case in 0..cases {
            let ns = 1 + rng.below(2000);
            let support: Vec<[f64; 3]> = if case % 3 == 0 {
                let side = 1 + rng.below(13);
                (0..ns).map(|_| [rng.below(side) as f64, rng.below(side) as f64, rng.below(side) as f64]).collect()
            } else {
                let s = [rng.uniform(0.1, 20.0), rng.uniform(0.1, 5.0), rng.uniform(0.1, 10.0)];
                (0..ns).map(|_| [rng.uniform(0.0, s[0]), rng.uniform(0.0, s[1]), rng.uniform(0.0, s[2])]).collect()
            };
            let k = 1 + rng.below(32.min(ns));
            let (query, same) = if case % 2 == 0 {
                (support.clone(), true)
            } else {
                let nq = 1 + rng.below(300);
                let lattice = case % 3 == 0;
                let q = (0..nq)
                    .map(|_| {
                        if lattice {
                            [rng.below(14) as f64 - 0.5, rng.below(14) as f64, rng.below(14) as f64 + 0.5]
                        } else {
                            [rng.uniform(-2.0, 22.0), rng.uniform(-2.0, 7.0), rng.uniform(-2.0, 12.0)]
                        }
                    })
                    .collect();
                (q, false)
            };
            let got = if same { knn(&support, &support, k)? } else { knn(&query, &support, k)? };
            if got.idx != brute_knn(&query, &support, k, same) {
                mismatches.push(format!("case {case} (Ns={ns}, k={k})"));
            }
        }
        Ok((mismatches.is_empty(), if mismatches.is_empty() { format!("{cases} cases") } else { mismatches.join(", ") }))
    })
}

/// Metrics from the matrix against a per-point recount with exact
/// rational means.
pub fn metrics_oracle(instances: usize) -> Outcome {
    timed("metrics equal naive recount", || {
        let mut worst = 0.0f64;
        let mut structure = 0usize;
        for seed in 0..instances as u64 {
            let mut rng = Prng::new(seed);
            let c = 2 + rng.below(7);
            let n = 1 + rng.below(3000);
            let present = 1 + rng.below(c);
            let truth: Vec<u8> = (0..n).map(|_| rng.below(present) as u8).collect();
            let pred: Vec<u8> =
                truth.iter().map(|&t| if rng.next_f64() < 0.7 { t } else { rng.below(c) as u8 }).collect();
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&truth, &pred)?;
            let m = cm.metrics()?;
            let (oa, acc, iou) = naive_fractions(&truth, &pred, c);
            for (a, b) in [(m.oa, ratio(oa)), (m.macc, exact_mean(&acc)), (m.miou, exact_mean(&iou))] {
                worst = worst.max((a - b).abs());
            }
            for k in 0..c {
                structure += (m.per_class_acc[k].is_some() != acc[k].is_some()) as usize;
                structure += (m.per_class_iou[k].is_some() != iou[k].is_some()) as usize;
            }
        }
        Ok((worst < 1e-12 && structure == 0, format!("{instances} instances, max deviation {worst:.1e}")))
    })
}

type Frac = (u64, u64);

fn ratio(f: Frac) -> f64 {
    f.0 as f64 / f.1 as f64
}

fn naive_fractions(truth: &[u8], pred: &[u8], c: usize) -> (Frac, Vec<Option<Frac>>, Vec<Option<Frac>>) {
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as u64;
    let mut acc = Vec::new();
    let mut iou = Vec::new();
    for class in 0..c as u8 {
        let mut tp = 0;
        let mut in_truth = 0;
        let mut in_either = 0;
        for (&t, &p) in truth.iter().zip(pred) {
            tp += (t == class && p == class) as u64;
            in_truth += (t == class) as u64;
            in_either += (t == class || p == class) as u64;
        }
        acc.push((in_truth > 0).then_some((tp, in_truth)));
        iou.push((in_either > 0).then_some((tp, in_either)));
    }
    ((correct, truth.len() as u64), acc, iou)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

fn exact_mean(fracs: &[Option<Frac>]) -> f64 {
    let present: Vec<(u128, u128)> = fracs.iter().flatten().map(|&(a, b)| (a as u128, b as u128)).collect();
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in &present {
        num = num * b + a * den;
        den *= b;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    num as f64 / (den * present.len() as u128) as f64
}

/// The self-test battery, sized to finish well inside five minutes.
pub fn selftest_suite(corrupt_gradient: bool) -> Vec<Outcome> {
    vec![
        op_gradients(1e-6, corrupt_gradient),
        residual_gradients(1e-4),
        network_gradients(256, 2, 1e-4),
        knn_exactness(60),
        metrics_oracle(50),
        permutation_invariance(60),
        attention_normalization(100),
        degenerate_pooling(),
    ]
}
