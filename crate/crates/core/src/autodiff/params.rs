use std::collections::HashMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor plus its Adam moments. Non-trainable entries (batch-norm
/// running statistics) live in the same store so they travel with checkpoints.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    /// Number of optimizer steps applied so far (Adam's `t`).
    pub step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: "registered twice".into(),
            });
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Prng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.uniform(-bound, bound)))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Blend batch statistics into running buffers:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_bn_update(&mut self, update: &BnUpdate<T>, momentum: f64) {
        let m = T::of(momentum);
        let one_minus = T::of(1.0 - momentum);
        for (id, batch) in [(update.mean, &update.batch_mean), (update.var, &update.batch_var)] {
            let running = self.params[id.0].value.data_mut();
            for (r, &b) in running.iter_mut().zip(batch) {
                *r = m * *r + one_minus * b;
            }
        }
    }
}

/// Batch statistics observed by one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_zero_moments() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Prng::new(1);
        let id = store.add_glorot("w", 10, 6, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        let p = store.get(id);
        assert_eq!(p.value.shape(), &[10, 6]);
        assert!(p.value.data().iter().all(|v| v.abs() <= bound));
        assert!(p.adam_m.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.adam_v.shape(), p.value.shape());
        assert!(store.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn bn_update_blends_with_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mean = store.add_buffer("m", Tensor::zeros(&[2])).unwrap();
        let var = store.add_buffer("v", Tensor::full(&[2], 1.0)).unwrap();
        store.apply_bn_update(
            &BnUpdate {
                mean,
                var,
                batch_mean: vec![1.0, 2.0],
                batch_var: vec![3.0, 1.0],
            },
            0.99,
        );
        let m = store.value(mean).data();
        assert!((m[0] - 0.01).abs() < 1e-15 && (m[1] - 0.02).abs() < 1e-15);
        let v = store.value(var).data();
        assert!((v[0] - 1.02).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }
}
