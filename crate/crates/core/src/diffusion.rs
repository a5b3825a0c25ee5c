//! Noise schedule, forward noising, training losses and the guided sampler.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::denoiser::{Denoiser, PersonalizationState, PromptTokens, Session, DEFAULT_LAMBDA_ATT};
use crate::error::invalid;
use crate::image::ImageBuffer;
use crate::latent::{self, LatentCode};
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LAMBDA_CFG: f64 = 4.0;
pub const DEFAULT_LAMBDA_GEN: f64 = 0.1;
pub const DEFAULT_LAMBDA_PERS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta ramp over `t_total` steps.
pub fn make_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_total == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("need T > 0 and 0 < beta_start <= beta_end < 1, got {t_total}, {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = (0..t_total)
        .map(|t| {
            if t_total == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (t_total - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// `abar_t` of the default schedule without building it; `t` past the end
/// is clamped.
pub fn default_alpha_bar(t: usize) -> f64 {
    let last = (DEFAULT_T - 1) as f64;
    (0..=t.min(DEFAULT_T - 1))
        .map(|s| 1.0 - (DEFAULT_BETA_START + (DEFAULT_BETA_END - DEFAULT_BETA_START) * s as f64 / last))
        .product()
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(invalid!("timestep {t} outside [0, {})", self.len()));
        }
        Ok(())
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, z0: &LatentCode, t: usize, eps: &LatentCode) -> Result<LatentCode> {
        self.check_t(t)?;
        if !z0.same_shape(eps) {
            return Err(invalid!("noise shape {:?} differs from latent {:?}", eps.shape(), z0.shape()));
        }
        let ab = self.alpha_bars[t];
        let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        Ok(z0.zip_map(eps, |z, e| a * z + b * e))
    }

    /// `num_steps` timesteps `floor(i T / n)`, in descending order.
    pub fn timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.len() {
            return Err(invalid!("num_steps must be in 1..={}, got {num_steps}", self.len()));
        }
        Ok((0..num_steps).rev().map(|i| i * self.len() / num_steps).collect())
    }

    /// One posterior step from `t` to `prev` (or to the clean estimate when
    /// `prev` is `None`), with the `beta~` variance and `x0` clipped to the
    /// latent range. `noise` is only read when `prev` is `Some`.
    pub fn step(&self, z: &LatentCode, eps_pred: &LatentCode, t: usize, prev: Option<usize>, noise: &LatentCode) -> LatentCode {
        let ab = self.alpha_bars[t];
        let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let x0 = z.zip_map(eps_pred, |z, e| ((z - sb * e) / sa).clamp(-1.0, 1.0));
        let Some(p) = prev else { return x0 };
        let ab_prev = self.alpha_bars[p];
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = libm::sqrt(ab_prev) * beta / (1.0 - ab);
        let ct = libm::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = libm::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        let mean = x0.zip_map(z, |x, z| c0 * x + ct * z);
        mean.zip_map(noise, |m, n| m + sigma * n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub lambda_cfg: f64,
    pub positive: PromptTokens,
    pub negative: PromptTokens,
    pub seed: u64,
    pub lambda_att: f64,
    /// Feed a null LQ image to the negative branch instead of the real one.
    pub null_lq_negative: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_STEPS,
            lambda_cfg: DEFAULT_LAMBDA_CFG,
            positive: PromptTokens::positive(),
            negative: PromptTokens::negative(),
            seed: 0,
            lambda_att: DEFAULT_LAMBDA_ATT,
            null_lq_negative: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > sched.len() {
            return Err(invalid!("num_steps must be in 1..={}, got {}", sched.len(), self.num_steps));
        }
        if !(self.lambda_cfg >= 0.0) {
            return Err(invalid!("lambda_cfg must be >= 0, got {}", self.lambda_cfg));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLossConfig {
    pub lambda_gen: f64,
    pub lambda_pers: f64,
}

impl Default for TrainLossConfig {
    fn default() -> Self {
        Self { lambda_gen: DEFAULT_LAMBDA_GEN, lambda_pers: DEFAULT_LAMBDA_PERS }
    }
}

impl TrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gen >= 0.0 && self.lambda_pers >= 0.0) {
            return Err(invalid!("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// `L_Diff + lambda_gen L_Gen + lambda_pers L_Pers`.
pub fn total_loss(l_diff: f64, l_gen: f64, l_pers: f64, cfg: &TrainLossConfig) -> f64 {
    l_diff + cfg.lambda_gen * l_gen + cfg.lambda_pers * l_pers
}

/// `neg + lambda (pos - neg)`, returning `pos` exactly at `lambda = 1`.
pub fn cfg_combine(pred_pos: &LatentCode, pred_neg: &LatentCode, lambda_cfg: f64) -> Result<LatentCode> {
    if !pred_pos.same_shape(pred_neg) {
        return Err(invalid!("CFG predictions differ in shape: {:?} vs {:?}", pred_pos.shape(), pred_neg.shape()));
    }
    if lambda_cfg == 1.0 {
        return Ok(pred_pos.clone());
    }
    Ok(pred_neg.zip_map(pred_pos, |n, p| n + lambda_cfg * (p - n)))
}

/// Mean squared error between `eps` and the prediction at `q_sample(z0, t, eps)`,
/// recorded on the session's graph.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_graph<T: Scalar>(
    session: &mut Session<'_, T>,
    sched: &NoiseSchedule,
    z0: &LatentCode,
    t: usize,
    eps: &LatentCode,
    prompt: &PromptTokens,
    lq: Option<&ImageBuffer>,
    ref_features: Option<&[Tensor<T>]>,
    lambda_att: f64,
) -> Result<Var> {
    let zt = sched.q_sample(z0, t, eps)?;
    let pred = session.forward(&zt.cast(), t, prompt, lq, ref_features, lambda_att)?;
    let target = session.graph.constant(eps.cast());
    Ok(session.graph.mse(pred, target))
}

/// `|| A_* / max A_* - A_eot / max A_eot ||^2` on graph columns.
pub fn pers_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, a_star: Var, a_eot: Var) -> Result<Var> {
    for v in [a_star, a_eot] {
        let max = g.value(v).data().iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        if !(max > 0.0) {
            return Err(Error::DegenerateMap);
        }
    }
    let s = g.div_by_max(a_star);
    let e = g.div_by_max(a_eot);
    let d = g.sub(s, e);
    Ok(g.sum_sq(d))
}

/// Plain-value form of [`pers_loss_graph`].
pub fn loss_pers(a_star: &[f64], a_eot: &[f64]) -> Result<f64> {
    if a_star.len() != a_eot.len() {
        return Err(invalid!("attention maps differ in length: {} vs {}", a_star.len(), a_eot.len()));
    }
    let ms = a_star.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let me = a_eot.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !(ms > 0.0 && me > 0.0) {
        return Err(Error::DegenerateMap);
    }
    Ok(a_star.iter().zip(a_eot).map(|(s, e)| (s / ms - e / me).powi(2)).sum())
}

/// `L_Diff` value for one `(t, eps)` draw.
#[allow(clippy::too_many_arguments)]
pub fn loss_diff<T: Scalar>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    z0: &LatentCode,
    t: usize,
    eps: &LatentCode,
    prompt: &PromptTokens,
    lq: Option<&ImageBuffer>,
    ref_features: Option<&[Tensor<T>]>,
    pstate: Option<&PersonalizationState<T>>,
    lambda_att: f64,
) -> Result<f64> {
    let mut s = Session::new(model, pstate, false, false);
    let l = diffusion_loss_graph(&mut s, sched, z0, t, eps, prompt, lq, ref_features, lambda_att)?;
    Ok(s.graph.scalar(l).f64())
}

/// `L_Gen`: [`loss_diff`] with a null LQ image.
#[allow(clippy::too_many_arguments)]
pub fn loss_gen<T: Scalar>(
    model: &Denoiser<T>,
    sched: &NoiseSchedule,
    z0: &LatentCode,
    t: usize,
    eps: &LatentCode,
    prompt: &PromptTokens,
    ref_features: Option<&[Tensor<T>]>,
    pstate: Option<&PersonalizationState<T>>,
    lambda_att: f64,
) -> Result<f64> {
    loss_diff(model, sched, z0, t, eps, prompt, None, ref_features, pstate, lambda_att)
}

/// A standard normal latent of the given shape.
pub fn normal_latent<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, c: usize) -> LatentCode {
    Tensor::new(h, w, c, rng::normal_vec(rng, h * w * c)).expect("shape")
}

/// Reference features for a `h x w` image region at step `t`: one
/// reference drawn uniformly, resized to the region if needed, noised with
/// fresh noise.
pub fn sampled_reference_features<T: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<T>,
    pstate: &PersonalizationState<T>,
    sched: &NoiseSchedule,
    dims: (usize, usize),
    t: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    let refs = pstate.references();
    let r = &refs[rng.random_range(0..refs.len())];
    let resized;
    let r = if r.dims() == dims {
        r
    } else {
        resized = r.resize_bilinear(dims.0, dims.1)?;
        &resized
    };
    let z0 = latent::encode(r)?;
    let eps = normal_latent(rng, z0.height(), z0.width(), z0.channels());
    let zt = sched.q_sample(&z0, t, &eps)?;
    model.site_features(&zt.cast(), t)
}

/// Guided noise prediction for one (sub-)latent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_prediction<T: Scalar>(
    model: &Denoiser<T>,
    z: &LatentCode,
    t: usize,
    lq: &ImageBuffer,
    ref_features: Option<&[Tensor<T>]>,
    pstate: Option<&PersonalizationState<T>>,
    cfg: &SamplerConfig,
) -> Result<LatentCode> {
    let zt = z.cast::<T>();
    let run = |prompt: &PromptTokens, lq: Option<&ImageBuffer>| -> Result<LatentCode> {
        Ok(model.forward(&zt, t, prompt, lq, ref_features, pstate, cfg.lambda_att)?.cast())
    };
    let neg_lq = if cfg.null_lq_negative { None } else { Some(lq) };
    // without a personalization state the prompt is never read, so both
    // branches coincide
    if cfg.lambda_cfg == 1.0 || (pstate.is_none() && !cfg.null_lq_negative) {
        return run(&cfg.positive, Some(lq));
    }
    if cfg.lambda_cfg == 0.0 {
        return run(&cfg.negative, neg_lq);
    }
    let pos = run(&cfg.positive, Some(lq))?;
    let neg = run(&cfg.negative, neg_lq)?;
    cfg_combine(&pos, &neg, cfg.lambda_cfg)
}

/// DDPM loop shared by the plain and tiled samplers. `predict(z, t, rng)`
/// returns the guided noise prediction for the full latent.
pub(crate) fn run_sampler<F>(
    shape: (usize, usize, usize),
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut predict: F,
) -> Result<LatentCode>
where
    F: FnMut(&LatentCode, usize, &mut rng::StreamRng) -> Result<LatentCode>,
{
    cfg.validate(sched)?;
    let (h, w, c) = shape;
    let mut noise_rng = rng::stream(cfg.seed, streams::SAMPLER);
    let mut ref_rng = rng::stream(cfg.seed, streams::SAMPLER_REFERENCE);
    let ts = sched.timesteps(cfg.num_steps)?;
    let mut z = normal_latent(&mut noise_rng, h, w, c);
    for (i, &t) in ts.iter().enumerate() {
        let eps = predict(&z, t, &mut ref_rng)?;
        let prev = ts.get(i + 1).copied();
        let noise = match prev {
            Some(_) => normal_latent(&mut noise_rng, h, w, c),
            None => LatentCode::zeros(h, w, c),
        };
        z = sched.step(&z, &eps, t, prev, &noise);
    }
    Ok(z)
}

/// Restores `lq` by guided DDPM sampling from pure noise.
pub fn sample<T: Scalar>(
    model: &Denoiser<T>,
    lq: &ImageBuffer,
    pstate: Option<&PersonalizationState<T>>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    let shape = latent::encode(lq)?.shape();
    let z = run_sampler(shape, sched, cfg, |z, t, ref_rng| {
        let refs = match pstate {
            Some(ps) => Some(sampled_reference_features(model, ps, sched, lq.dims(), t, ref_rng)?),
            None => None,
        };
        guided_prediction(model, z, t, lq, refs.as_deref(), pstate, cfg)
    })?;
    latent::decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_boundaries() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0 - 1e-4);
        assert!(s.alpha_bar(999) < 0.01);
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        let ts = s.timesteps(200).unwrap();
        assert_eq!((ts[0], ts[199], ts.len()), (995, 0, 200));
        for t in [0, 1, 500, 999] {
            assert!((default_alpha_bar(t) - s.alpha_bar(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_boundaries() {
        let p = Tensor::new(1, 1, 3, vec![0.1, -0.7, 0.3]).unwrap();
        let n = Tensor::new(1, 1, 3, vec![0.9, 0.2, -0.4]).unwrap();
        assert_eq!(cfg_combine(&p, &n, 1.0).unwrap(), p);
        assert_eq!(cfg_combine(&p, &n, 0.0).unwrap(), n);
        assert_eq!(cfg_combine(&p, &p, 4.0).unwrap(), p);
    }

    #[test]
    fn pers_loss_values() {
        assert_eq!(loss_pers(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(loss_pers(&[0.2, 0.4], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(loss_pers(&[0.0, 0.0], &[0.1, 0.2]), Err(Error::DegenerateMap));
    }

    #[test]
    fn final_step_returns_clipped_estimate() {
        let s = NoiseSchedule::default();
        let z = Tensor::new(1, 1, 2, vec![0.5, 3.0]).unwrap();
        let e = LatentCode::zeros(1, 1, 2);
        let x0 = s.step(&z, &e, 0, None, &e);
        assert!((x0.data()[0] - 0.5 / libm::sqrt(s.alpha_bar(0))).abs() < 1e-15);
        assert_eq!(x0.data()[1], 1.0);
    }
}
