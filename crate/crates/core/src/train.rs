//! Base-model training and per-identity personalization.

use alloc::vec::Vec;
use rand::Rng;

use crate::data::{self, IdentityDataset, ReferenceSet};
use crate::degradation::{self, Level};
use crate::denoiser::{Denoiser, PersonalizationState, PromptTokens, Session, DEFAULT_LAMBDA_ATT};
use crate::diffusion::{self, NoiseSchedule, TrainLossConfig};
use crate::error::invalid;
use crate::image::ImageBuffer;
use crate::latent::{self, LatentCode};
use crate::optim::Adam;
use crate::rng::{self, streams, StreamRng};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: usize,
    pub l_diff: f64,
    pub l_gen: f64,
    pub l_pers: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaseTrainConfig {
    /// Passes over the dataset; one pass is `ceil(images / batch_size)` steps.
    pub epochs: usize,
    pub batch_size: usize,
    /// Working resolution of training images.
    pub crop_size: usize,
    pub crop_prob: f64,
    pub p_hq: f64,
    pub level: Level,
    pub lr: f64,
    /// Decay of the exponential moving average of the weights that is
    /// written back after the last step; 0 keeps the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            crop_size: 64,
            crop_prob: data::DEFAULT_CROP_PROB,
            p_hq: degradation::P_HQ,
            level: Level::Heavy,
            lr: 1e-3,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_size == 0 {
            return Err(invalid!("batch size and crop size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_hq) || !(0.0..=1.0).contains(&self.crop_prob) {
            return Err(invalid!("probabilities must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid!("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn steps_for(&self, dataset: &IdentityDataset) -> usize {
        self.epochs * dataset.image_count().div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PersonalizeConfig {
    pub iterations: usize,
    /// Number of reference images drawn for an identity.
    pub n_ref: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_token: f64,
    pub loss: TrainLossConfig,
    pub crop_size: usize,
    pub crop_prob: f64,
    pub p_hq: f64,
    pub level: Level,
    pub lambda_att: f64,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            n_ref: data::DEFAULT_N_REF,
            batch_size: 2,
            lr_adapter: 3e-3,
            lr_token: 5e-3,
            loss: TrainLossConfig::default(),
            crop_size: 64,
            crop_prob: data::DEFAULT_CROP_PROB,
            p_hq: degradation::P_HQ,
            level: Level::Heavy,
            lambda_att: DEFAULT_LAMBDA_ATT,
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ref == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(invalid!("n_ref, batch size and crop size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_hq) || !(0.0..=1.0).contains(&self.crop_prob) {
            return Err(invalid!("probabilities must lie in [0, 1]"));
        }
        if !(self.lr_adapter >= 0.0 && self.lr_token >= 0.0) {
            return Err(invalid!("learning rates must be >= 0"));
        }
        self.loss.validate()
    }
}

struct Streams {
    data: StreamRng,
    degradation: StreamRng,
    timestep: StreamRng,
    noise: StreamRng,
    reference: StreamRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            data: rng::stream(seed, streams::DATA),
            degradation: rng::stream(seed, streams::DEGRADATION),
            timestep: rng::stream(seed, streams::TIMESTEP),
            noise: rng::stream(seed, streams::NOISE),
            reference: rng::stream(seed, streams::REFERENCE),
        }
    }

    fn t_eps(&mut self, sched: &NoiseSchedule, z0: &LatentCode) -> (usize, LatentCode) {
        let t = self.timestep.random_range(0..sched.len());
        let eps = diffusion::normal_latent(&mut self.noise, z0.height(), z0.width(), z0.channels());
        (t, eps)
    }
}

/// Degraded counterpart of a training image.
fn degraded(hq: &ImageBuffer, level: Level, p_hq: f64, s: &mut Streams) -> Result<ImageBuffer> {
    let rec = degradation::sample_degradation_with(level, p_hq, &mut s.degradation);
    degradation::degrade(hq, &rec)
}

fn owned_grads<T: Scalar>(grads: Vec<Option<&Tensor<T>>>) -> Vec<Option<Tensor<T>>> {
    grads.into_iter().map(|g| g.cloned()).collect()
}

/// Trains the base denoiser and LQ encoder on degraded/clean pairs with
/// `L_Diff` only. `on_step` sees every step's losses.
pub fn train_base<T: Scalar>(
    model: &mut Denoiser<T>,
    dataset: &IdentityDataset,
    cfg: &BaseTrainConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if dataset.image_count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let prompt = PromptTokens::positive();
    let mut s = Streams::new(cfg.seed);
    let mut opt = Adam::new(model.params().tensors(), alloc::vec![cfg.lr; model.params().len()]);
    let mut ema = Ema::new(model.params().tensors(), cfg.ema_decay);
    let mut logs = Vec::new();
    for step in 0..cfg.steps_for(dataset) {
        let grads;
        let mut l_diff = 0.0;
        {
            let mut sess = Session::new(model, None, true, false);
            let mut total = None;
            for _ in 0..cfg.batch_size {
                let hq = data::sample_training_example(dataset, cfg.crop_size, cfg.crop_prob, &mut s.data)?;
                let lq = degraded(&hq, cfg.level, cfg.p_hq, &mut s)?;
                let z0 = latent::encode(&hq)?;
                let (t, eps) = s.t_eps(sched, &z0);
                let l = diffusion::diffusion_loss_graph(&mut sess, sched, &z0, t, &eps, &prompt, Some(&lq), None, 0.0)?;
                l_diff += sess.graph.scalar(l).f64();
                total = Some(match total {
                    Some(a) => sess.graph.add(a, l),
                    None => l,
                });
            }
            let total = sess.graph.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64);
            sess.backward(total);
            grads = owned_grads(sess.base_grads());
        }
        opt.step(model.params_mut().tensors_mut(), &grads);
        ema.update(model.params().tensors());
        l_diff /= cfg.batch_size as f64;
        let log = StepLog { step, l_diff, l_gen: 0.0, l_pers: 0.0, total: l_diff };
        on_step(&log);
        logs.push(log);
    }
    ema.write(model.params_mut().tensors_mut());
    Ok(logs)
}

/// Bias-corrected exponential moving average of parameter tensors.
struct Ema {
    decay: f64,
    avg: Vec<Vec<f64>>,
    steps: i32,
}

impl Ema {
    fn new<T: Scalar>(params: &[Tensor<T>], decay: f64) -> Self {
        let avg = if decay > 0.0 { params.iter().map(|p| alloc::vec![0.0; p.len()]).collect() } else { Vec::new() };
        Self { decay, avg, steps: 0 }
    }

    fn update<T: Scalar>(&mut self, params: &[Tensor<T>]) {
        if self.avg.is_empty() {
            return;
        }
        self.steps += 1;
        for (a, p) in self.avg.iter_mut().zip(params) {
            for (x, v) in a.iter_mut().zip(p.data()) {
                *x = self.decay * *x + (1.0 - self.decay) * v.f64();
            }
        }
    }

    fn write<T: Scalar>(&self, params: &mut [Tensor<T>]) {
        if self.avg.is_empty() || self.steps == 0 {
            return;
        }
        let correction = 1.0 - libm::pow(self.decay, f64::from(self.steps));
        for (a, p) in self.avg.iter().zip(params) {
            for (x, v) in p.data_mut().iter_mut().zip(a) {
                *x = T::of(v / correction);
            }
        }
    }
}

/// Fine-tunes a fresh [`PersonalizationState`] for one identity. Only the
/// adapters, gains and `*` embedding change; `model` is never written.
pub fn personalize<T: Scalar>(
    model: &Denoiser<T>,
    refs: &ReferenceSet,
    train_images: &[ImageBuffer],
    cfg: &PersonalizeConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(PersonalizationState<T>, Vec<StepLog>)> {
    cfg.validate()?;
    if train_images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pstate = PersonalizationState::new(model, refs.images().to_vec(), cfg.seed)?;
    let star = pstate.params().index_of("star").expect("state has a star token");
    let lrs = (0..pstate.params().len()).map(|i| if i == star { cfg.lr_token } else { cfg.lr_adapter }).collect();
    let mut opt = Adam::new(pstate.params().tensors(), lrs);
    let prompt = PromptTokens::positive();
    let mut s = Streams::new(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.iterations);
    let ref_features = |t: usize, s: &mut Streams| -> Result<Vec<Tensor<T>>> {
        let r = data::sample_reference(refs, &mut s.reference);
        let z0 = latent::encode(r)?;
        let eps = diffusion::normal_latent(&mut s.reference, z0.height(), z0.width(), z0.channels());
        let zt = sched.q_sample(&z0, t, &eps)?;
        model.site_features(&zt.cast(), t)
    };
    for step in 0..cfg.iterations {
        let grads;
        let (mut l_diff, mut l_gen, mut l_pers) = (0.0, 0.0, 0.0);
        {
            let mut sess = Session::new(model, Some(&pstate), false, true);
            let mut total = None;
            for _ in 0..cfg.batch_size {
                let img = &train_images[data::sample_index(train_images.len(), &mut s.data)];
                let (hq, _) = data::training_view(img, cfg.crop_size, cfg.crop_prob, &mut s.data)?;
                let lq = degraded(&hq, cfg.level, cfg.p_hq, &mut s)?;
                let z0 = latent::encode(&hq)?;

                let (t, eps) = s.t_eps(sched, &z0);
                let rf = ref_features(t, &mut s)?;
                let ld = diffusion::diffusion_loss_graph(
                    &mut sess,
                    sched,
                    &z0,
                    t,
                    &eps,
                    &prompt,
                    Some(&lq),
                    Some(&rf),
                    cfg.lambda_att,
                )?;
                let lp = sess.pers_loss(&rf, &prompt)?;

                let (t_gen, eps_gen) = s.t_eps(sched, &z0);
                let rf_gen = ref_features(t_gen, &mut s)?;
                let lg = diffusion::diffusion_loss_graph(
                    &mut sess,
                    sched,
                    &z0,
                    t_gen,
                    &eps_gen,
                    &prompt,
                    None,
                    Some(&rf_gen),
                    cfg.lambda_att,
                )?;

                l_diff += sess.graph.scalar(ld).f64();
                l_gen += sess.graph.scalar(lg).f64();
                l_pers += sess.graph.scalar(lp).f64();
                let mut item = ld;
                if cfg.loss.lambda_gen != 0.0 {
                    let w = sess.graph.scale(lg, cfg.loss.lambda_gen);
                    item = sess.graph.add(item, w);
                }
                if cfg.loss.lambda_pers != 0.0 {
                    let w = sess.graph.scale(lp, cfg.loss.lambda_pers);
                    item = sess.graph.add(item, w);
                }
                total = Some(match total {
                    Some(a) => sess.graph.add(a, item),
                    None => item,
                });
            }
            let total = sess.graph.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64);
            sess.backward(total);
            grads = owned_grads(sess.pers_grads());
        }
        opt.step(pstate.params_mut().tensors_mut(), &grads);
        let n = cfg.batch_size as f64;
        let (l_diff, l_gen, l_pers) = (l_diff / n, l_gen / n, l_pers / n);
        let log = StepLog { step, l_diff, l_gen, l_pers, total: diffusion::total_loss(l_diff, l_gen, l_pers, &cfg.loss) };
        on_step(&log);
        logs.push(log);
    }
    Ok((pstate, logs))
}
