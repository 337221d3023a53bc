//! Adam, the warm-up/cosine schedule and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{apply_augment, make_batch, AugmentParams, AugmentPolicy, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::loss::{deep_supervision_loss, RegionMask, SupervisionWeights};
use crate::network::{Model, ModelConfig};
use crate::nn::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` from `(parameter, gradient)` pairs.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
            if params.entries()[id.index()].kind != ParamKind::Weight || g.shape() != params.get(*id).shape() {
                return Err(Error::Usage(format!(
                    "gradient for {} does not match a trainable parameter",
                    params.entries()[id.index()].name
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = lit::<T>(lr / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        let (eps, wd) = (lit::<T>(c.eps), lit::<T>(c.weight_decay));
        for (id, g) in grads {
            let p = params.get_mut(*id);
            let n = p.numel();
            let m = self.m[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup` epochs, then cosine decay reaching zero at the last epoch.
pub fn learning_rate(base: f64, epoch: usize, warmup: usize, total: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let t = (epoch - warmup + 1) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Synthetic training set description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSet {
    pub count: usize,
    pub num_lesions: usize,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSet {
    fn default() -> Self {
        Self {
            count: 8,
            num_lesions: 2,
            scale_range: (4.0, 8.0),
            seed: 1000,
        }
    }
}

impl PhantomSet {
    /// Normalized phantoms at `extents`.
    pub fn generate(&self, extents: [usize; 3]) -> Result<Vec<(Volume, MaskVolume)>> {
        (0..self.count)
            .map(|i| {
                let (mut v, m) =
                    crate::data::generate_phantom(self.seed + i as u64, extents, self.num_lesions, self.scale_range)?;
                v.normalize();
                Ok((v, m))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub supervision: SupervisionWeights,
    pub augment: Option<AugmentPolicy>,
    pub data: PhantomSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            warmup_epochs: 30,
            epochs: 500,
            batch_size: 2,
            seed: 0,
            supervision: SupervisionWeights::default(),
            augment: None,
            data: PhantomSet::default(),
        }
    }
}

impl TrainConfig {
    /// Full-batch overfit profile on eight toy phantoms.
    pub fn overfit() -> Self {
        Self {
            model: ModelConfig::toy(),
            optimizer: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            warmup_epochs: 10,
            epochs: 300,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.supervision.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    /// Dice loss of heads 1/16, 1/8, 1/4, 1/1.
    pub stages: [f64; 4],
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_per_stage: [f64; 4],
    pub lr: f64,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    optimizer: Adam<T>,
    supervision: SupervisionWeights,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, optimizer: AdamConfig, supervision: SupervisionWeights) -> Result<Self> {
        let optimizer = Adam::new(optimizer, model.params())?;
        Ok(Self {
            model,
            optimizer,
            supervision,
        })
    }

    /// Forward, backward and one Adam update. Parameters are untouched on error.
    pub fn step(&mut self, x: &Tensor<T>, target: &RegionMask, lr: f64) -> Result<StepLosses> {
        let deep = self.model.config().deep_supervision;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (net, store) = self.model.split();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        let out = net.forward(&mut ctx, xv)?;
        let bindings = ctx.bindings();
        drop(ctx);
        let loss = deep_supervision_loss(&mut tape, &out.heads, target, &self.supervision, deep)?;
        let total = tape.value(loss.total)?.item()?.as_f64();
        let mut stages = [0.0; 4];
        for (s, v) in stages.iter_mut().zip(loss.stages) {
            *s = tape.value(v)?.item()?.as_f64();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = tape.backward(loss.total)?;
        let pairs = bindings
            .into_iter()
            .map(|(id, v)| Ok((id, grads.get(v)?.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.optimizer.update(self.model.params_mut(), &pairs, lr)?;
        Ok(StepLosses { total, stages })
    }
}

/// Train on `cases` following `config`, calling `on_epoch` after every epoch.
pub fn train<F>(config: &TrainConfig, cases: &[(Volume, MaskVolume)], mut on_epoch: F) -> Result<Model<f32>>
where
    F: FnMut(&EpochLog, &Model<f32>) -> Result<()>,
{
    config.validate()?;
    if cases.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    let model = Model::<f32>::new(&config.model)?;
    let mut trainer = Trainer::new(model, config.optimizer.clone(), config.supervision)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 0..config.epochs {
        let lr = learning_rate(config.optimizer.lr, epoch, config.warmup_epochs, config.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_stages, mut batches) = (0.0, [0.0; 4], 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| match &config.augment {
                    None => Ok(cases[i].clone()),
                    Some(policy) => {
                        let (v, m) = &cases[i];
                        let seed = config.seed ^ ((epoch as u64) << 32) ^ i as u64;
                        let p = AugmentParams::sample(seed, v.extents(), v.channels(), policy)?;
                        apply_augment(v, m, &p)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, target) = make_batch::<f32>(&batch)?;
            let s = trainer.step(&x, &target, lr)?;
            sum_total += s.total;
            for k in 0..4 {
                sum_stages[k] += s.stages[k];
            }
            batches += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            loss_total: sum_total / n,
            loss_per_stage: sum_stages.map(|s| s / n),
            lr,
        };
        on_epoch(&log, &trainer.model)?;
    }
    Ok(trainer.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert!((learning_rate(1e-4, 0, 30, 500) - 1e-4 / 30.0).abs() < 1e-18);
        assert!((learning_rate(1e-4, 29, 30, 500) - 1e-4).abs() < 1e-18);
        assert!(learning_rate(1e-4, 499, 30, 500) <= 1e-12);
        let mid = learning_rate(1.0, 30 + 235 - 1, 30, 500);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = crate::nn::Builder::new(&mut store, &mut rng).constant("w", &[3], 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let g = Tensor::new(&[3], vec![2.0, -0.5, 0.0]).unwrap();
        adam.update(&mut store, &[(id, g)], 0.1).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = crate::nn::Builder::new(&mut store, &mut rng).constant("w", &[1], 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let g = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        assert!(adam.update(&mut store, &[(id, g)], 0.1).is_err());
        assert_eq!(store.get(id).data(), &[1.0]);
    }
}
