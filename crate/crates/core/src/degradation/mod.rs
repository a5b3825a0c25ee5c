//! Light and heavy synthetic degradations with replayable records.
//!
//! [`sample_degradation`] materializes every random choice into a
//! [`DegradationRecord`]; [`degrade`] is a pure function of image and record.
//!
//! Light: blur, optional downsampling, optional Gaussian noise, JPEG, and
//! upsampling back to the input size. Heavy additionally applies, before
//! that, optional ISP noise, motion blur and median blur; after it a sinc
//! low-pass and, usually, a second light pass with fresh parameters.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::image::ops::{self, Interpolation};
use crate::image::ImageBuffer;
use crate::rng::{self, streams};
use crate::{Error, Result};

pub mod jpeg;

pub const P_NOISE: f64 = 0.4;
pub const P_DOWNSAMPLE: f64 = 0.7;
pub const P_ISP: f64 = 0.5;
pub const P_MOTION: f64 = 0.05;
pub const P_MEDIAN: f64 = 0.1;
pub const P_SECOND_PASS: f64 = 0.9;
pub const P_HQ: f64 = 0.03;

pub const SIGMA_RANGE: (f64, f64) = (0.1, 10.0);
pub const JPEG_RANGE: (u8, u8) = (30, 100);
pub const MAX_BLUR_KERNEL: usize = 21;
pub const ISP_GAMMA: f64 = 2.2;
pub const SHOT_SCALE_RANGE: (f64, f64) = (0.0, 0.01);
pub const READ_STD_RANGE: (f64, f64) = (0.0, 0.05);
pub const MOTION_LENGTH_RANGE: (usize, usize) = (3, 15);
pub const MEDIAN_SIZES: [usize; 3] = [3, 5, 7];
pub const SINC_KERNEL_RANGE: (usize, usize) = (7, 21);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Level {
    Light,
    Heavy,
}

impl Level {
    pub fn down_factor_range(self) -> (f64, f64) {
        match self {
            Level::Light => (1.0, 4.0),
            Level::Heavy => (1.0, 10.0),
        }
    }

    pub fn noise_std_range(self) -> (f64, f64) {
        match self {
            Level::Light => (0.0, 2.0),
            Level::Heavy => (0.0, 15.0),
        }
    }
}

/// One application of the light equation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LightPass {
    pub sigma: f64,
    pub downsample: bool,
    pub down_factor: f64,
    pub noise: bool,
    /// On the 0-255 intensity scale.
    pub noise_std: f64,
    pub noise_seed: u64,
    pub jpeg_quality: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IspParams {
    pub gamma: f64,
    pub shot_scale: f64,
    pub read_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MotionParams {
    /// Radians in `[0, pi)`.
    pub angle: f64,
    /// Pixels.
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SincParams {
    pub cutoff: f64,
    pub kernel_size: usize,
}

/// Every random choice of one degradation. `None` means the step is not
/// applied.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DegradationRecord {
    pub level: Level,
    pub passthrough_hq: bool,
    pub interpolation: Interpolation,
    pub first: LightPass,
    pub isp: Option<IspParams>,
    pub motion: Option<MotionParams>,
    pub median: Option<usize>,
    pub sinc: Option<SincParams>,
    pub second_pass: Option<LightPass>,
}

/// Samples with the default pass-through probability of 0.03.
pub fn sample_degradation<R: Rng + ?Sized>(level: Level, rng: &mut R) -> DegradationRecord {
    sample_degradation_with(level, P_HQ, rng)
}

pub fn sample_degradation_with<R: Rng + ?Sized>(level: Level, p_hq: f64, rng: &mut R) -> DegradationRecord {
    let passthrough_hq = rng::bernoulli(rng, p_hq);
    let first = sample_light(level, rng);
    let mut record = DegradationRecord {
        level,
        passthrough_hq,
        interpolation: Interpolation::Bilinear,
        first,
        isp: None,
        motion: None,
        median: None,
        sinc: None,
        second_pass: None,
    };
    if level == Level::Heavy {
        let isp = IspParams {
            gamma: ISP_GAMMA,
            shot_scale: rng::uniform(rng, SHOT_SCALE_RANGE.0, SHOT_SCALE_RANGE.1),
            read_std: rng::uniform(rng, READ_STD_RANGE.0, READ_STD_RANGE.1),
            seed: rng.random(),
        };
        record.isp = rng::bernoulli(rng, P_ISP).then_some(isp);
        let motion = MotionParams {
            angle: rng::uniform(rng, 0.0, core::f64::consts::PI),
            length: rng.random_range(MOTION_LENGTH_RANGE.0..=MOTION_LENGTH_RANGE.1),
        };
        record.motion = rng::bernoulli(rng, P_MOTION).then_some(motion);
        let median = MEDIAN_SIZES[rng.random_range(0..MEDIAN_SIZES.len())];
        record.median = rng::bernoulli(rng, P_MEDIAN).then_some(median);
        let half_sizes = (SINC_KERNEL_RANGE.0 / 2)..=(SINC_KERNEL_RANGE.1 / 2);
        record.sinc = Some(SincParams {
            cutoff: rng::uniform(rng, core::f64::consts::PI / 3.0, core::f64::consts::PI),
            kernel_size: 2 * rng.random_range(half_sizes) + 1,
        });
        let second = sample_light(level, rng);
        record.second_pass = rng::bernoulli(rng, P_SECOND_PASS).then_some(second);
    }
    record
}

fn sample_light<R: Rng + ?Sized>(level: Level, rng: &mut R) -> LightPass {
    let (r_lo, r_hi) = level.down_factor_range();
    let (d_lo, d_hi) = level.noise_std_range();
    LightPass {
        sigma: rng::uniform(rng, SIGMA_RANGE.0, SIGMA_RANGE.1),
        downsample: rng::bernoulli(rng, P_DOWNSAMPLE),
        down_factor: rng::uniform(rng, r_lo, r_hi),
        noise: rng::bernoulli(rng, P_NOISE),
        noise_std: rng::uniform(rng, d_lo, d_hi),
        noise_seed: rng.random(),
        jpeg_quality: rng.random_range(JPEG_RANGE.0..=JPEG_RANGE.1),
    }
}

impl DegradationRecord {
    /// A light record that applies only the minimal blur and the JPEG step.
    pub fn minimal(level: Level, sigma: f64, jpeg_quality: u8) -> Self {
        Self {
            level,
            passthrough_hq: false,
            interpolation: Interpolation::Bilinear,
            first: LightPass {
                sigma,
                downsample: false,
                down_factor: 1.0,
                noise: false,
                noise_std: 0.0,
                noise_seed: 0,
                jpeg_quality,
            },
            isp: None,
            motion: None,
            median: None,
            sinc: None,
            second_pass: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidRecord(msg));
        self.validate_pass(&self.first)?;
        if let Some(p) = &self.second_pass {
            self.validate_pass(p)?;
        }
        if self.level == Level::Light
            && (self.isp.is_some() || self.motion.is_some() || self.median.is_some() || self.sinc.is_some() || self.second_pass.is_some())
        {
            return bad("light records cannot carry heavy-only steps".into());
        }
        if let Some(isp) = &self.isp {
            if !(isp.gamma > 0.0 && isp.shot_scale >= 0.0 && isp.read_std >= 0.0) {
                return bad(alloc::format!("bad ISP parameters {isp:?}"));
            }
        }
        if let Some(m) = &self.motion {
            if m.length < 1 || !m.angle.is_finite() {
                return bad(alloc::format!("bad motion parameters {m:?}"));
            }
        }
        if let Some(k) = self.median {
            if k % 2 == 0 {
                return bad(alloc::format!("median size {k} must be odd"));
            }
        }
        if let Some(s) = &self.sinc {
            if s.kernel_size % 2 == 0 || s.kernel_size < 7 || !(s.cutoff > 0.0 && s.cutoff <= core::f64::consts::PI) {
                return bad(alloc::format!("bad sinc parameters {s:?}"));
            }
        }
        Ok(())
    }

    fn validate_pass(&self, p: &LightPass) -> Result<()> {
        let (r_lo, r_hi) = self.level.down_factor_range();
        let (d_lo, d_hi) = self.level.noise_std_range();
        let ok = p.sigma >= SIGMA_RANGE.0
            && p.sigma <= SIGMA_RANGE.1
            && p.down_factor >= r_lo
            && p.down_factor <= r_hi
            && p.noise_std >= d_lo
            && p.noise_std <= d_hi
            && p.jpeg_quality >= JPEG_RANGE.0
            && p.jpeg_quality <= JPEG_RANGE.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidRecord(alloc::format!("light-pass parameters out of range: {p:?}")))
        }
    }
}

/// Applies `record` to `img`; output has the input's dimensions.
pub fn degrade(img: &ImageBuffer, record: &DegradationRecord) -> Result<ImageBuffer> {
    record.validate()?;
    if record.passthrough_hq {
        return Ok(img.clone());
    }
    let mut x = img.clone();
    if let Some(isp) = &record.isp {
        let mut r = rng::stream(isp.seed, streams::DEGRADATION);
        x = apply_isp_noise(&x, isp.gamma, isp.shot_scale, isp.read_std, &mut r)?;
    }
    if let Some(m) = &record.motion {
        let (k, size) = motion_kernel(m.angle, m.length);
        x = ops::convolve_2d(&x, &k, size);
    }
    if let Some(size) = record.median {
        x = ops::median_filter(&x, size);
    }
    x = light_pass(&x, &record.first, record.interpolation)?;
    if let Some(s) = &record.sinc {
        x = apply_sinc_filter(&x, s.cutoff, s.kernel_size)?;
    }
    if let Some(p) = &record.second_pass {
        x = light_pass(&x, p, record.interpolation)?;
    }
    Ok(x)
}

/// Odd Gaussian kernel length for `sigma`: `ceil(6 sigma)` rounded up to odd,
/// capped at [`MAX_BLUR_KERNEL`].
pub fn blur_kernel_size(sigma: f64) -> usize {
    let n = (libm::ceil(6.0 * sigma) as usize).max(1);
    let n = if n.is_multiple_of(2) { n + 1 } else { n };
    n.min(MAX_BLUR_KERNEL)
}

fn light_pass(img: &ImageBuffer, p: &LightPass, interp: Interpolation) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    let size = blur_kernel_size(p.sigma);
    let mut x = if size > 1 {
        let k = ops::gaussian_kernel(p.sigma, size);
        ops::convolve_separable(img, &k, &k)
    } else {
        img.clone()
    };
    if p.downsample {
        let dh = (libm::round(h as f64 / p.down_factor) as usize).max(1);
        let dw = (libm::round(w as f64 / p.down_factor) as usize).max(1);
        x = ops::resize(&x, dh, dw, interp)?;
    }
    if p.noise {
        let std = p.noise_std / 255.0;
        let mut r = rng::stream(p.noise_seed, streams::NOISE);
        x = x.map(|v| (v as f64 + std * rng::normal(&mut r)) as f32);
    }
    x = jpeg::compress(&x, p.jpeg_quality);
    if x.dims() != (h, w) {
        x = ops::resize(&x, h, w, interp)?;
    }
    Ok(x)
}

/// Gamma-linearize, add Gaussian noise with variance
/// `shot_scale * signal + read_std^2`, clamp, and re-apply the gamma.
pub fn apply_isp_noise<R: Rng + ?Sized>(
    img: &ImageBuffer,
    gamma: f64,
    shot_scale: f64,
    read_std: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    if !(gamma > 0.0) {
        return Err(crate::error::invalid!("gamma must be positive, got {gamma}"));
    }
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let lin = libm::pow(v as f64, gamma);
            let std = libm::sqrt((shot_scale * lin + read_std * read_std).max(0.0));
            let noisy = (lin + std * rng::normal(rng)).clamp(0.0, 1.0);
            libm::pow(noisy, 1.0 / gamma) as f32
        })
        .collect();
    ImageBuffer::from_clamped(img.height(), img.width(), data)
}

/// Normalized line kernel of the given length and angle; returns
/// (row-major weights, side).
pub fn motion_kernel(angle: f64, length: usize) -> (Vec<f64>, usize) {
    let size = if length.is_multiple_of(2) { length + 1 } else { length };
    let c = (size / 2) as f64;
    let mut k = vec![0.0f64; size * size];
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));
    let half = (length as f64 - 1.0) / 2.0;
    let steps = 4 * length.max(1);
    for i in 0..=steps {
        let t = -half + 2.0 * half * i as f64 / steps as f64;
        let (x, y) = (c + t * dx, c + t * dy);
        let (x0, y0) = (libm::floor(x), libm::floor(y));
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (px, py) = (x0 + ox, y0 + oy);
                if px >= 0.0 && py >= 0.0 && (px as usize) < size && (py as usize) < size {
                    k[py as usize * size + px as usize] += wx * wy;
                }
            }
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (k, size)
}

/// Hamming-windowed sinc taps with cutoff `cutoff` (radians per sample),
/// normalized to unit sum.
pub fn sinc_kernel(cutoff: f64, kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size.is_multiple_of(2) || kernel_size < 7 {
        return Err(crate::error::invalid!("sinc kernel size must be odd and >= 7, got {kernel_size}"));
    }
    if !(cutoff > 0.0 && cutoff <= core::f64::consts::PI) {
        return Err(crate::error::invalid!("sinc cutoff must lie in (0, pi], got {cutoff}"));
    }
    let r = (kernel_size / 2) as f64;
    let n = kernel_size as f64 - 1.0;
    let mut k: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let x = i as f64 - r;
            let ideal = if x == 0.0 {
                cutoff / core::f64::consts::PI
            } else {
                libm::sin(cutoff * x) / (core::f64::consts::PI * x)
            };
            let window = 0.54 - 0.46 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / n);
            ideal * window
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable windowed-sinc low-pass with reflective borders.
pub fn apply_sinc_filter(img: &ImageBuffer, cutoff: f64, kernel_size: usize) -> Result<ImageBuffer> {
    let k = sinc_kernel(cutoff, kernel_size)?;
    Ok(ops::convolve_separable(img, &k, &k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> ImageBuffer {
        let p = crate::face::FaceParams::mean();
        crate::face::generate_face(&p, 32, 1).unwrap()
    }

    #[test]
    fn light_records_have_no_heavy_steps() {
        let mut r = rng::stream(1, 0);
        for _ in 0..500 {
            let rec = sample_degradation(Level::Light, &mut r);
            assert!(rec.isp.is_none() && rec.motion.is_none() && rec.median.is_none());
            assert!(rec.sinc.is_none() && rec.second_pass.is_none());
            rec.validate().unwrap();
        }
    }

    #[test]
    fn minimal_record_is_near_identity() {
        let img = test_image();
        let out = degrade(&img, &DegradationRecord::minimal(Level::Light, 0.1, 100)).unwrap();
        assert!(out.max_abs_diff(&img) <= 0.02);
    }

    #[test]
    fn passthrough_and_replay() {
        let img = test_image();
        let mut r = rng::stream(2, 0);
        let mut rec = sample_degradation(Level::Heavy, &mut r);
        let a = degrade(&img, &rec).unwrap();
        assert_eq!(a, degrade(&img, &rec).unwrap());
        assert_eq!(a.dims(), img.dims());
        rec.passthrough_hq = true;
        assert_eq!(degrade(&img, &rec).unwrap(), img);
    }

    #[test]
    fn malformed_records_are_rejected() {
        let img = test_image();
        let mut rec = DegradationRecord::minimal(Level::Light, 0.1, 100);
        rec.first.sigma = 11.0;
        assert!(matches!(degrade(&img, &rec), Err(Error::InvalidRecord(_))));
        let mut rec = DegradationRecord::minimal(Level::Light, 1.0, 80);
        rec.median = Some(3);
        assert!(matches!(degrade(&img, &rec), Err(Error::InvalidRecord(_))));
    }

    #[test]
    fn blur_kernel_sizes() {
        assert_eq!(blur_kernel_size(0.1), 1);
        assert_eq!(blur_kernel_size(0.5), 3);
        assert_eq!(blur_kernel_size(1.0), 7);
        assert_eq!(blur_kernel_size(10.0), 21);
    }

    #[test]
    fn isp_zero_noise_round_trips() {
        let img = test_image();
        let out = apply_isp_noise(&img, 2.2, 0.0, 0.0, &mut rng::stream(0, 0)).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
        assert!(apply_isp_noise(&img, 0.0, 0.0, 0.0, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn motion_kernel_is_normalized_line() {
        let (k, size) = motion_kernel(0.0, 7);
        assert_eq!(size, 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // horizontal line: all mass on the centre row
        assert!((k[3 * 7..4 * 7].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinc_all_pass_and_dc() {
        let img = test_image();
        let out = apply_sinc_filter(&img, core::f64::consts::PI, 11).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-3);
        let flat = ImageBuffer::filled(16, 16, [0.4, 0.5, 0.6]).unwrap();
        assert!(apply_sinc_filter(&flat, 1.3, 9).unwrap().max_abs_diff(&flat) < 1e-6);
        assert!(apply_sinc_filter(&flat, 1.3, 8).is_err());
    }
}
