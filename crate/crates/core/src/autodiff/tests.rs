use super::*;
use crate::error::Error;
use crate::rng::Prng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let zb = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let ones = tape.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
    let b = tape.constant(t(&[1], &[3.0])).unwrap();
    let y = tape.linear(ones, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);

    let mut rng = Prng::new(0);
    let xs = tape.constant(random(&[4, 3, 5], &mut rng)).unwrap();
    let zw = tape.constant(Tensor::zeros(&[5, 2])).unwrap();
    let zb = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.linear(xs, zw, Some(zb)).unwrap();
    assert_eq!(tape.shape(y), &[4, 3, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let w = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let err = tape.linear(x, w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn relu_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let p = tape.constant(t(&[3], &[0.5, 1.0, 3.0])).unwrap();
    let y = tape.relu(p).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 1.0, 3.0]);
}

#[test]
fn relu_gradient_at_one_matches_fd() {
    let mut store = ParamStore::new();
    store.add("x", t(&[1], &[1.0])).unwrap();
    let report = grad_check(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ParamId(0))?;
            let y = tape.relu(x)?;
            tape.sum_all(y)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
    let mut tape = Tape::new();
    let x = tape.param(&store, ParamId(0)).unwrap();
    let y = tape.relu(x).unwrap();
    let l = tape.sum_all(y).unwrap();
    assert_eq!(tape.backward(l, &store).unwrap()[0].data(), &[1.0]);
}

#[test]
fn batch_norm_train_fixed_point_and_stats() {
    let mut store = ParamStore::<f64>::new();
    let g = store.add("g", Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add("b", Tensor::zeros(&[2])).unwrap();
    // per-channel zero mean, unit (biased) variance
    let x = t(&[4, 2], &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let (gv, bv) = (tape.param(&store, g).unwrap(), tape.param(&store, b).unwrap());
    let (y, _) = tape.batch_norm_train(xv, gv, bv).unwrap();
    close(tape.value(y).data(), x.data(), 1e-5);

    let mut rng = Prng::new(5);
    let r = random(&[64, 3], &mut rng);
    let g3 = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let b3 = tape.constant(Tensor::zeros(&[3])).unwrap();
    let rv = tape.constant(r).unwrap();
    let (y, stats) = tape.batch_norm_train(rv, g3, b3).unwrap();
    assert_eq!(stats.mean.len(), 3);
    let out = tape.value(y);
    for c in 0..3 {
        let col: Vec<f64> = (0..64).map(|i| out.data()[i * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "{mean}");
        // BN epsilon shrinks the variance by var/(var+eps) ≈ 1 - eps/var.
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn batch_norm_eval_identity_and_small_batch_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[0.5, -3.0, 2.0, 7.0])).unwrap();
    let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let y = tape.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    close(tape.value(y).data(), &[0.5, -3.0, 2.0, 7.0], 1e-4);
    let one = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    assert!(matches!(
        tape.batch_norm_train(one, g, b),
        Err(Error::BatchTooSmall { rows: 1 })
    ));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 4, 1], 0.7)).unwrap();
    let y = tape.softmax_over_neighbors(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
    let x = tape.constant(t(&[1, 1, 3], &[5.0, -2.0, 100.0])).unwrap();
    let y = tape.softmax_over_neighbors(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0]);
    let x = tape.constant(t(&[1, 2, 1], &[0.0, 3f64.ln()])).unwrap();
    let y = tape.softmax_over_neighbors(x).unwrap();
    close(tape.value(y).data(), &[0.25, 0.75], 1e-15);
}

#[test]
fn softmax_sums_to_one_per_channel() {
    let mut rng = Prng::new(9);
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::new(vec![5, 7, 3], (0..105).map(|_| rng.uniform(-30.0, 30.0)).collect()).unwrap())
        .unwrap();
    let y = tape.softmax_over_neighbors(x).unwrap();
    let v = tape.value(y).data();
    for n in 0..5 {
        for c in 0..3 {
            let s: f64 = (0..7).map(|k| v[(n * 7 + k) * 3 + c]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn concat_examples_and_gradient_routing() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[1, 1], &[1.0])).unwrap();
    let b = store.add("b", t(&[1, 1], &[2.0])).unwrap();
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.param(&store, a).unwrap(), tape.param(&store, b).unwrap());
    let c = tape.concat_channels(av, bv).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
    let empty = tape.constant(Tensor::zeros(&[1, 0])).unwrap();
    let same = tape.concat_channels(av, empty).unwrap();
    assert_eq!(tape.value(same).data(), &[1.0]);
    // weight the outputs by [3, 5] so the routed gradients are distinguishable
    let wts = tape.constant(t(&[1, 2], &[3.0, 5.0])).unwrap();
    let p = tape.mul(c, wts).unwrap();
    let l = tape.sum_all(p).unwrap();
    let g = tape.backward(l, &store).unwrap();
    assert_eq!(g[0].data(), &[3.0]);
    assert_eq!(g[1].data(), &[5.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
    let y = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
    assert!(tape.concat_channels(x, y).is_err());
}

#[test]
fn binary_examples_and_broadcast() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2], &[2.0, 3.0])).unwrap();
    let b = tape.constant(t(&[2], &[4.0, 5.0])).unwrap();
    let ones = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let p = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[8.0, 15.0]);
    let q = tape.mul(a, ones).unwrap();
    assert_eq!(tape.value(q).data(), &[2.0, 3.0]);
    let z = tape.sub(a, a).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0, 0.0]);

    // [N, C] against [N, K, C]
    let pp = tape.constant(t(&[2, 1], &[10.0, 20.0])).unwrap();
    let nb = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let d = tape.sub(pp, nb).unwrap();
    assert_eq!(tape.value(d).data(), &[9.0, 8.0, 17.0, 16.0]);
    let pp3 = tape.constant(t(&[2, 1, 1], &[10.0, 20.0])).unwrap();
    let d = tape.sub(nb, pp3).unwrap();
    assert_eq!(tape.value(d).data(), &[-9.0, -8.0, -17.0, -16.0]);
    let bad = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(tape.add(a, bad).is_err());
}

#[test]
fn neighbor_reductions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let s = tape.sum_over_neighbors(x).unwrap();
    assert_eq!(tape.shape(s), &[2, 2]);
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ones = tape.constant(Tensor::full(&[3, 16, 2], 1.0)).unwrap();
    let s = tape.sum_over_neighbors(ones).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| v == 16.0));

    let mut rng = Prng::new(11);
    let r = random(&[4, 6, 3], &mut rng);
    let rv = tape.constant(r.clone()).unwrap();
    let s = tape.sum_over_neighbors(rv).unwrap();
    // loop oracle, same k order
    for n in 0..4 {
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += r.data()[(n * 6 + k) * 3 + c];
            }
            assert_eq!(tape.value(s).data()[n * 3 + c], acc);
        }
    }
    let m = tape.max_over_neighbors(rv).unwrap();
    for n in 0..4 {
        for c in 0..3 {
            let best = (0..6).map(|k| r.data()[(n * 6 + k) * 3 + c]).fold(f64::MIN, f64::max);
            assert_eq!(tape.value(m).data()[n * 3 + c], best);
        }
    }
}

#[test]
fn gather_examples() {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let g = tape.gather_rows(f, &[1, 0], &[1, 2]).unwrap();
    assert_eq!(tape.shape(g), &[1, 2, 2]);
    assert_eq!(tape.value(g).data(), &[3.0, 4.0, 1.0, 2.0]);
    let s = tape.gather_rows(f, &[0, 0, 1, 1], &[2, 2]).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    assert!(matches!(
        tape.gather_rows(f, &[2], &[1]),
        Err(Error::IndexOutOfRange { index: 2, len: 2, .. })
    ));
}

#[test]
fn gather_scatter_gradient_matches_fd() {
    let mut rng = Prng::new(2);
    let mut store = ParamStore::new();
    store.add("f", random(&[3, 2], &mut rng)).unwrap();
    let w = random(&[2, 2, 2], &mut rng);
    let report = grad_check(
        &mut store,
        |tape, s| {
            let f = tape.param(s, ParamId(0))?;
            let g = tape.gather_rows(f, &[2, 0, 2, 2], &[2, 2])?;
            let wv = tape.constant(w.clone())?;
            let p = tape.mul(g, wv)?;
            let q = tape.mul(p, g)?;
            tape.sum_all(q)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn dropout_examples() {
    let mut rng = Prng::new(4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[100_000], 1.0)).unwrap();
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y).data();
    let kept = v.iter().filter(|&&e| e != 0.0).count() as f64 / v.len() as f64;
    assert!((kept - 0.5).abs() < 0.01, "{kept}");
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros(&[3, 8])).unwrap();
    let l = tape.cross_entropy(u, &[0, 3, 7]).unwrap();
    assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);

    let mut m = vec![0.0; 8];
    m[2] = 1000.0;
    let sat = tape.constant(t(&[1, 8], &m)).unwrap();
    let l = tape.cross_entropy(sat, &[2]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);

    let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!((tape.value(l).data()[0] - (-(0.75f64).ln())).abs() < 1e-12);
    assert!(tape.cross_entropy(x, &[2]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut store = ParamStore::new();
    store.add("z", t(&[2, 2], &[0.0, 3f64.ln(), 1.0, 1.0])).unwrap();
    let mut tape = Tape::new();
    let z = tape.param(&store, ParamId(0)).unwrap();
    let l = tape.cross_entropy(z, &[1, 0]).unwrap();
    let g = tape.backward(l, &store).unwrap();
    close(g[0].data(), &[0.125, -0.125, -0.25, 0.25], 1e-15);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
    let unused = store.add("u", t(&[3], &[1.0, 1.0, 1.0])).unwrap();
    let mut tape = Tape::<f64>::new();
    let wv = tape.param(&store, w).unwrap();
    let s = tape.sum_all(wv).unwrap();
    let g = tape.backward(s, &store).unwrap();
    assert_eq!(g[w.0].data(), &[1.0, 1.0]);
    assert_eq!(g[unused.0].data(), &[0.0, 0.0, 0.0]);

    let mut tape = Tape::<f64>::new();
    let wv = tape.param(&store, w).unwrap();
    let sq = tape.mul(wv, wv).unwrap();
    let s = tape.sum_all(sq).unwrap();
    let g = tape.backward(s, &store).unwrap();
    assert_eq!(g[w.0].data(), &[2.0, 4.0]);

    // consumed tape
    assert!(matches!(tape.backward(s, &store), Err(Error::TapeConsumed)));
    assert!(matches!(tape.relu(wv), Err(Error::TapeConsumed)));
    tape.reset();
    let wv = tape.param(&store, w).unwrap();
    assert!(matches!(tape.backward(wv, &store), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn non_finite_outputs_are_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1], &[1e200])).unwrap();
    let w = tape.constant(t(&[1, 1], &[1e200])).unwrap();
    assert!(matches!(tape.linear(x, w, None), Err(Error::NonFinite { .. })));
}

#[test]
fn gradcheck_linear_relu_softmax() {
    let mut rng = Prng::new(21);
    let mut store = ParamStore::new();
    store.add("x", random(&[3, 2, 4], &mut rng)).unwrap();
    store.add("w", random(&[4, 3], &mut rng)).unwrap();
    store.add("b", random(&[3], &mut rng)).unwrap();
    let weights = random(&[3, 2, 3], &mut rng);

    let linear = grad_check(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ParamId(0))?;
            let w = tape.param(s, ParamId(1))?;
            let b = tape.param(s, ParamId(2))?;
            let y = tape.linear(x, w, Some(b))?;
            let c = tape.constant(weights.clone())?;
            let p = tape.mul(y, c)?;
            tape.sum_all(p)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(linear.max_rel_error < 1e-7, "{linear:?}");

    let composed = grad_check(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ParamId(0))?;
            let w = tape.param(s, ParamId(1))?;
            let b = tape.param(s, ParamId(2))?;
            let y = tape.linear(x, w, Some(b))?;
            let sm = tape.softmax_over_neighbors(y)?;
            let c = tape.constant(weights.clone())?;
            let p = tape.mul(sm, c)?;
            tape.sum_all(p)
        },
        GradCheckOptions { zero_tol: 1e-8, ..Default::default() },
    )
    .unwrap();
    assert!(composed.max_rel_error < 1e-6, "{composed:?}");
    // a per-channel bias is a constant shift along k, which softmax ignores
    assert_eq!(composed.structural_zeros, 3, "{composed:?}");
    assert!(composed.max_zero_abs_error < 1e-9);
}

#[test]
fn gradcheck_every_op() {
    let mut rng = Prng::new(33);
    let mut store = ParamStore::new();
    // keep values away from relu/max kinks
    let x: Vec<f64> = (0..2 * 3 * 4)
        .map(|_| {
            let v = rng.uniform(0.1, 1.0);
            if rng.next_f64() < 0.5 { -v } else { v }
        })
        .collect();
    store.add("x", Tensor::new(vec![2, 3, 4], x).unwrap()).unwrap();
    store.add("p", random(&[2, 4], &mut rng)).unwrap();
    store.add("g", random(&[4], &mut rng)).unwrap();
    store.add("s", random(&[4], &mut rng)).unwrap();
    let weights = random(&[2, 8], &mut rng);
    let labels = [1u32, 6];
    let report = grad_check(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ParamId(0))?;
            let p = tape.param(s, ParamId(1))?;
            let g = tape.param(s, ParamId(2))?;
            let sh = tape.param(s, ParamId(3))?;
            let r = tape.relu(x)?;
            let d = tape.sub(p, r)?;
            let a = tape.add(d, x)?;
            let (bn, _) = tape.batch_norm_train(a, g, sh)?;
            let sm = tape.softmax_over_neighbors(bn)?;
            let m = tape.mul(sm, x)?;
            let rep = tape.repeat_over_neighbors(p, 3)?;
            let cat = tape.concat_channels(m, rep)?;
            let mean = tape.mean_over_neighbors(cat)?;
            let mx = tape.max_over_neighbors(cat)?;
            let sum = tape.sum_over_neighbors(cat)?;
            let t1 = tape.add(mean, mx)?;
            let t2 = tape.add(t1, sum)?;
            let c = tape.constant(weights.clone())?;
            let logits = tape.mul(t2, c)?;
            tape.cross_entropy(logits, &labels)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn eval_batch_norm_gradient_matches_fd() {
    let mut rng = Prng::new(8);
    let mut store = ParamStore::new();
    store.add("x", random(&[5, 3], &mut rng)).unwrap();
    store.add("g", random(&[3], &mut rng)).unwrap();
    store.add("b", random(&[3], &mut rng)).unwrap();
    let w = random(&[5, 3], &mut rng);
    let report = grad_check(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ParamId(0))?;
            let g = tape.param(s, ParamId(1))?;
            let b = tape.param(s, ParamId(2))?;
            let y = tape.batch_norm_eval(x, g, b, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?;
            let c = tape.constant(w.clone())?;
            let p = tape.mul(y, c)?;
            tape.sum_all(p)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn f32_and_f64_agree_on_small_graph() {
    fn run<T: Real>() -> Vec<f64> {
        let mut tape = Tape::<T>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap()).unwrap();
        let w = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap()).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.softmax_over_neighbors(y).unwrap();
        tape.value(s).to_f64()
    }
    close(&run::<f32>(), &run::<f64>(), 1e-6);
}
