//! Central-difference gradient checking in 64-bit.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Clone, Copy, Debug)]
pub enum Probe {
    /// Every coordinate of every trainable parameter.
    All,
    /// Up to `per_tensor` random coordinates from each trainable parameter.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub probe: Probe,
    /// Coordinates where both the analytic and numeric derivative are below
    /// this magnitude are compared in absolute terms: structural zeros, and
    /// gradients too small for a difference quotient of an O(1) loss to
    /// resolve relatively. `0.0` applies the relative formula everywhere.
    pub zero_tol: f64,
    /// Re-probe disagreeing coordinates at half the step. If the two
    /// central differences disagree with each other the stencil straddles a
    /// non-differentiable point (a ReLU or max switching) and the
    /// coordinate is counted in `kinks` instead of `max_rel_error`.
    pub detect_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            probe: Probe::All,
            zero_tol: 0.0,
            detect_kinks: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max |a − n| / max(1e-8, |a| + |n|) over the compared coordinates.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    pub structural_zeros: usize,
    /// Largest |a − n| among structural zeros.
    pub max_zero_abs_error: f64,
    pub kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss { shape: v.shape().to_vec() });
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check objective".into() });
    }
    Ok(x)
}

const KINK_PROBE_BELOW: f64 = 1e-6;
const KINK_REL: f64 = 1e-5;
const KINK_ABS: f64 = 1e-9;

fn central_difference<F>(store: &mut ParamStore<f64>, f: &mut F, id: ParamId, i: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let orig = store.value(id).data()[i];
    store.value_mut(id).data_mut()[i] = orig + eps;
    let plus = eval(store, f);
    store.value_mut(id).data_mut()[i] = orig - eps;
    let minus = eval(store, f);
    store.value_mut(id).data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Analytic gradients of `f` with respect to every entry of `store`.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, f: &mut F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)
}

/// Compares `f`'s reverse-mode gradients against central differences.
/// `f` must be a pure function of the store (reseed any randomness inside).
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut f)?;
    grad_check_against(store, f, &analytic, opts)
}

/// Same as [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    analytic: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    let mut rng = match opts.probe {
        Probe::Sample { seed, .. } => Some(Prng::new(seed)),
        Probe::All => None,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = match (opts.probe, rng.as_mut()) {
            (Probe::Sample { per_tensor, .. }, Some(rng)) if per_tensor < len => {
                (0..per_tensor).map(|_| rng.below(len)).collect()
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let numeric = central_difference(store, &mut f, id, i, opts.eps)?;
            let a = analytic[id.0].data()[i];
            if opts.detect_kinks && relative_error(a, numeric) > KINK_PROBE_BELOW {
                let half = central_difference(store, &mut f, id, i, opts.eps / 2.0)?;
                if (numeric - half).abs() > KINK_REL * (numeric.abs() + half.abs()) + KINK_ABS {
                    report.kinks += 1;
                    continue;
                }
            }
            if a.abs().max(numeric.abs()) < opts.zero_tol {
                report.structural_zeros += 1;
                report.max_zero_abs_error = report.max_zero_abs_error.max((a - numeric).abs());
                continue;
            }
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
