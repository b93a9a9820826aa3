use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam. Moments live on each [`Parameter`](crate::autodiff::Parameter).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update with learning rate `lr` and advances `store.step`.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter_mut().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Parameter {
                    name: p.name.clone(),
                    reason: format!("gradient shape {:?} != {:?}", g.shape(), p.value.shape()),
                });
            }
        }
        let t = store.step + 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (p, g) in store.iter_mut().zip(grads) {
            if !p.trainable {
                continue;
            }
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.step = t;
        Ok(())
    }
}
