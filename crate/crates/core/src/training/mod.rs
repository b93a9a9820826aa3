//! Mini-batch training with Adam and an exponentially decaying learning
//! rate, plus whole-cloud inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Adam, BnUpdate, DType, ParamStore, Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::geometry::{crop_around, crop_fixed_count, PointCloud};
use crate::layers::{Ctx, Mode, BN_MOMENTUM};
use crate::network::{build_pyramid, input_features, predict, DlaNet, DlaNetConfig};
use crate::rng::Prng;

/// Stream id for the pyramid sampling used at inference time.
pub const EVAL_STREAM: u64 = u64::MAX;
/// Stream id for the crops used to re-estimate batch-norm statistics.
const REFRESH_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub points_per_sample: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub precision: DType,
    /// Largest cloud evaluated in one forward pass; bigger clouds are chunked.
    pub eval_chunk: usize,
    /// Forward passes used by [`Trainer::refresh_bn_stats`] at the end of
    /// [`Trainer::fit`]; 0 keeps the exponential running averages.
    pub bn_refresh_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 6,
            lr0: 1e-2,
            lr_decay: 0.95,
            points_per_sample: 40960,
            steps_per_epoch: 100,
            seed: 0,
            precision: DType::F32,
            eval_chunk: 40960,
            bn_refresh_passes: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr_decay = {} must lie in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size and steps_per_epoch must be at least 1"));
        }
        if self.points_per_sample == 0 || self.eval_chunk == 0 {
            return Err(Error::invalid("points_per_sample and eval_chunk must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · lr_decay^epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub oa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub oa: f64,
}

pub fn labels_u32(cloud: &PointCloud) -> Result<Vec<u32>> {
    cloud
        .labels
        .as_ref()
        .map(|l| l.iter().map(|&v| v as u32).collect())
        .ok_or_else(|| Error::invalid("training and evaluation need labelled clouds"))
}

pub struct Trainer<T: Real> {
    pub net: DlaNet,
    pub store: ParamStore<T>,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh network initialised from `cfg.seed`.
    pub fn new(net_cfg: &DlaNetConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if T::DTYPE != cfg.precision {
            return Err(Error::invalid(format!(
                "trainer element type {:?} differs from configured precision {:?}",
                T::DTYPE,
                cfg.precision
            )));
        }
        let (net, store) = DlaNet::init(net_cfg, cfg.seed)?;
        Ok(Trainer { net, store, cfg, adam: Adam::default(), epoch: 0 })
    }

    /// Restores parameters, optimiser state and the epoch counter from a
    /// checkpoint written by [`Trainer::save`].
    pub fn resume(net_cfg: &DlaNetConfig, cfg: TrainConfig, path: &std::path::Path) -> Result<Self> {
        let mut t = Trainer::new(net_cfg, cfg)?;
        checkpoint::load::<T>(path)?.load_into(&mut t.store)?;
        t.epoch = (t.store.step / t.cfg.steps_per_epoch as u64) as usize;
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// One optimiser step over `batch_size` random crops. Batch items run
    /// in order; gradients are averaged and batch-norm statistics applied
    /// in that same order.
    fn step(&mut self, clouds: &[PointCloud], lr: f64, rng: &mut Prng) -> Result<(f64, u64, u64)> {
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut updates = Vec::new();
        let (mut loss_sum, mut correct, mut total) = (0.0, 0u64, 0u64);
        for item in 0..self.cfg.batch_size {
            let step = self.store.step;
            let locate = |e: Error| match e {
                Error::NonFinite { op } => Error::NonFinite { op: format!("{op} (step {step}, batch item {item})") },
                e => e,
            };
            let cloud = &clouds[rng.below(clouds.len())];
            let (crop, _) = crop_fixed_count(cloud, self.cfg.points_per_sample, rng)?;
            let labels = labels_u32(&crop)?;
            let pyramid = build_pyramid(&crop.positions, &self.net.cfg, rng)?;
            let feats = input_features(&crop, self.net.cfg.use_rgb)?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train);
            let logits = self.net.forward(&mut ctx, &feats, &pyramid, rng).map_err(locate)?;
            let loss = tape.cross_entropy(logits, &labels).map_err(locate)?;
            let value = tape.value(loss).data()[0].f64();
            if !value.is_finite() {
                return Err(locate(Error::NonFinite { op: "loss".into() }));
            }
            loss_sum += value;
            let pred = predict(tape.value(logits));
            correct += pred.iter().zip(&labels).filter(|(&p, &l)| p as u32 == l).count() as u64;
            total += labels.len() as u64;
            updates.extend(tape.take_bn_updates());
            let g = tape.backward(loss, &self.store).map_err(locate)?;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x = *x + y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch_size >= 1");
        let scale = T::of(1.0 / self.cfg.batch_size as f64);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
        self.adam.step(&mut self.store, &grads, lr)?;
        for u in &updates {
            self.store.apply_bn_update(u, BN_MOMENTUM);
        }
        if let Some(p) = self.store.iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite { op: format!("parameter {} after step {}", p.1.name, self.store.step) });
        }
        Ok((loss_sum / self.cfg.batch_size as f64, correct, total))
    }

    /// Runs epoch `self.epoch` and advances the counter. Randomness is
    /// derived from `(seed, epoch)`, so a run resumed from a checkpoint
    /// taken at an epoch boundary continues bit-identically.
    pub fn train_epoch(
        &mut self,
        clouds: &[PointCloud],
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochStats> {
        if clouds.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let mut rng = Prng::derive(self.cfg.seed, epoch as u64);
        let (mut loss_sum, mut correct, mut total) = (0.0, 0u64, 0u64);
        for _ in 0..self.cfg.steps_per_epoch {
            let (loss, c, t) = self.step(clouds, lr, &mut rng)?;
            loss_sum += loss;
            correct += c;
            total += t;
            on_step(&StepRecord { epoch, step: self.store.step, lr, loss, oa: c as f64 / t as f64 })?;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / self.cfg.steps_per_epoch as f64,
            oa: correct as f64 / total as f64,
        })
    }

    /// Runs the remaining epochs up to `cfg.epochs`, then refreshes the
    /// batch-norm statistics when `cfg.bn_refresh_passes > 0`.
    pub fn fit(
        &mut self,
        clouds: &[PointCloud],
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let stats = self.train_epoch(clouds, on_step)?;
            on_epoch(&stats)?;
        }
        if self.cfg.bn_refresh_passes > 0 {
            self.refresh_bn_stats(clouds, self.cfg.bn_refresh_passes)?;
        }
        Ok(())
    }

    /// Sets every batch-norm running mean and variance to the average of the
    /// batch statistics over `passes` train-mode forward passes on training
    /// crops, with the weights frozen.
    pub fn refresh_bn_stats(&mut self, clouds: &[PointCloud], passes: usize) -> Result<()> {
        if clouds.is_empty() || passes == 0 {
            return Err(Error::invalid("refreshing batch-norm statistics needs clouds and at least one pass"));
        }
        let mut rng = Prng::derive(self.cfg.seed, REFRESH_STREAM);
        let mut sums: Vec<(BnUpdate<T>, Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..passes {
            let cloud = &clouds[rng.below(clouds.len())];
            let (crop, _) = crop_fixed_count(cloud, self.cfg.points_per_sample, &mut rng)?;
            let pyramid = build_pyramid(&crop.positions, &self.net.cfg, &mut rng)?;
            let feats = input_features(&crop, self.net.cfg.use_rgb)?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train);
            self.net.forward(&mut ctx, &feats, &pyramid, &mut rng)?;
            let updates = tape.take_bn_updates();
            if sums.is_empty() {
                sums = updates
                    .into_iter()
                    .map(|u| {
                        let (m, v) = (u.batch_mean.iter().map(|x| x.f64()).collect(), u.batch_var.iter().map(|x| x.f64()).collect());
                        (u, m, v)
                    })
                    .collect();
                continue;
            }
            for ((_, m, v), u) in sums.iter_mut().zip(&updates) {
                m.iter_mut().zip(&u.batch_mean).for_each(|(a, b)| *a += b.f64());
                v.iter_mut().zip(&u.batch_var).for_each(|(a, b)| *a += b.f64());
            }
        }
        let inv = 1.0 / passes as f64;
        for (mut u, m, v) in sums {
            u.batch_mean = m.iter().map(|x| T::of(x * inv)).collect();
            u.batch_var = v.iter().map(|x| T::of(x * inv)).collect();
            self.store.apply_bn_update(&u, 0.0);
        }
        Ok(())
    }

    pub fn evaluate(&self, cloud: &PointCloud) -> Result<Tensor<T>> {
        evaluate_full(&self.net, &self.store, cloud, &self.cfg)
    }
}

fn forward_eval<T: Real>(net: &DlaNet, store: &ParamStore<T>, cloud: &PointCloud, rng: &mut Prng) -> Result<Tensor<T>> {
    let pyramid = build_pyramid(&cloud.positions, &net.cfg, rng)?;
    let feats = input_features(cloud, net.cfg.use_rgb)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let logits = net.forward(&mut ctx, &feats, &pyramid, rng)?;
    Ok(tape.value(logits).clone())
}

/// Eval-mode logits for every point of `cloud`. Clouds up to
/// `cfg.eval_chunk` points go through one forward pass. Larger clouds are
/// covered by crops of `eval_chunk` points centred on the lowest-index point
/// not yet inside any crop's inner half (the half nearest the centre). Each
/// point keeps the logits of the crop in which it ranked closest to the
/// centre; ties go to the earlier crop.
pub fn evaluate_full<T: Real>(net: &DlaNet, store: &ParamStore<T>, cloud: &PointCloud, cfg: &TrainConfig) -> Result<Tensor<T>> {
    let mut rng = Prng::derive(cfg.seed, EVAL_STREAM);
    let n = cloud.len();
    if n <= cfg.eval_chunk {
        return forward_eval(net, store, cloud, &mut rng);
    }
    let c = net.cfg.n_class;
    let mut out = vec![T::zero(); n * c];
    let mut best_rank = vec![usize::MAX; n];
    let inner = (cfg.eval_chunk / 2).max(1);
    let mut next = 0;
    while next < n {
        let idx = crop_around(cloud, next, cfg.eval_chunk, &mut rng)?;
        let logits = forward_eval(net, store, &cloud.select(&idx), &mut rng)?;
        for (rank, &i) in idx.iter().enumerate() {
            let i = i as usize;
            if rank < best_rank[i] {
                best_rank[i] = rank;
                out[i * c..(i + 1) * c].copy_from_slice(logits.row(rank));
            }
        }
        while next < n && best_rank[next] < inner {
            next += 1;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Confusion matrix of `evaluate_full` predictions against the cloud labels.
pub fn confusion<T: Real>(net: &DlaNet, store: &ParamStore<T>, cloud: &PointCloud, cfg: &TrainConfig) -> Result<ConfusionMatrix> {
    let truth = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluation needs a labelled cloud"))?;
    let pred = predict(&evaluate_full(net, store, cloud, cfg)?);
    let mut cm = ConfusionMatrix::new(net.cfg.n_class);
    cm.accumulate(truth, &pred)?;
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert!((lr_schedule(1, &cfg) - 0.0095).abs() < 1e-15);
        assert!((lr_schedule(2, &cfg) - 0.009025).abs() < 1e-15);
        for e in 0..50 {
            assert!(lr_schedule(e + 1, &cfg) < lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.0, ..Default::default() }.validate().is_ok());
        let d = TrainConfig::default();
        assert_eq!((d.lr0, d.batch_size, d.epochs, d.points_per_sample), (0.01, 6, 100, 40960));
    }
}
