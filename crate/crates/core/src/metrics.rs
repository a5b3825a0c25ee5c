//! Restoration metrics: PSNR, SSIM, landmark MSE and identity similarity.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::face;
use crate::image::{ops, ImageBuffer};
use crate::Result;

pub const PSNR_CAP: f64 = 100.0;
pub const LMSE_CAP: f64 = 128.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Maps a face image to a unit-norm identity vector.
pub trait IdentityEmbedder {
    fn embed(&self, img: &ImageBuffer) -> Vec<f64>;
}

/// Returns landmarks in pixel coordinates, or `None` when no face is found.
pub trait LandmarkDetector {
    fn detect(&self, img: &ImageBuffer) -> Option<Vec<(f64, f64)>>;
}

/// Identity and landmarks recovered by inverting the synthetic face renderer.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaceOracle;

impl IdentityEmbedder for FaceOracle {
    fn embed(&self, img: &ImageBuffer) -> Vec<f64> {
        match face::fit(img) {
            Some(f) => f.params.embedding(),
            // no face: a fixed unit vector, identical for all failures
            None => face::FaceParams::mean().embedding(),
        }
    }
}

impl LandmarkDetector for FaceOracle {
    fn detect(&self, img: &ImageBuffer) -> Option<Vec<(f64, f64)>> {
        let fit = face::fit(img).filter(|f| f.rms <= face::FIT_FAILURE_RMS)?;
        let (h, w) = img.dims();
        let pts = fit.params.landmarks(h, face::Jitter::default());
        let inside = pts.iter().all(|&(x, y)| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64);
        inside.then(|| pts.to_vec())
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid!("image dimensions differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP))
}

/// Mean SSIM of the luma channels over all fully covered window positions.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let la = a.luma();
    let lb = b.luma();
    let k = ops::gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let wgt = ky * kx;
                    let i = (y + dy) * w + x + dx;
                    let (va, vb) = (la[i], lb[i]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean squared landmark distance; detection failure on either image, or a
/// landmark-count mismatch, yields [`LMSE_CAP`]. Larger values are capped.
pub fn lmse(a: &ImageBuffer, b: &ImageBuffer, detector: &dyn LandmarkDetector) -> f64 {
    let (Some(pa), Some(pb)) = (detector.detect(a), detector.detect(b)) else {
        return LMSE_CAP;
    };
    landmark_mse(&pa, &pb)
}

/// Mean squared distance between corresponding points, capped.
pub fn landmark_mse(pa: &[(f64, f64)], pb: &[(f64, f64)]) -> f64 {
    if pa.len() != pb.len() || pa.is_empty() {
        return LMSE_CAP;
    }
    let m = pa.iter().zip(pb).map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sum::<f64>() / pa.len() as f64;
    m.min(LMSE_CAP)
}

/// `100 <embed(a), embed(b)>`.
pub fn id_cosine(a: &ImageBuffer, b: &ImageBuffer, embedder: &dyn IdentityEmbedder) -> f64 {
    cosine_percent(&embedder.embed(a), &embedder.embed(b))
}

pub fn cosine_percent(ea: &[f64], eb: &[f64]) -> f64 {
    100.0 * ea.iter().zip(eb).map(|(x, y)| x * y).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lmse: f64,
    pub id_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// A restored image, its ground truth, and a row label.
pub struct EvalPair<'a> {
    pub name: String,
    pub restored: &'a ImageBuffer,
    pub ground_truth: &'a ImageBuffer,
}

pub fn evaluate_dataset(
    pairs: &[EvalPair<'_>],
    embedder: &dyn IdentityEmbedder,
    detector: &dyn LandmarkDetector,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        rows.push(MetricsRow {
            name: p.name.clone(),
            psnr: psnr(p.restored, p.ground_truth, 1.0)?,
            ssim: ssim(p.restored, p.ground_truth)?,
            lmse: lmse(p.restored, p.ground_truth, detector),
            id_percent: id_cosine(p.restored, p.ground_truth, embedder),
        });
    }
    let n = rows.len() as f64;
    let mean = MetricsRow {
        name: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lmse: rows.iter().map(|r| r.lmse).sum::<f64>() / n,
        id_percent: rows.iter().map(|r| r.id_percent).sum::<f64>() / n,
    };
    Ok(MetricsReport { rows, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn psnr_closed_form() {
        let a = ImageBuffer::filled(8, 8, [0.0; 3]).unwrap();
        let b = ImageBuffer::filled(8, 8, [0.5; 3]).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020_599_913).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &ImageBuffer::filled(4, 8, [0.0; 3]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let data: Vec<f32> = (0..16 * 16).flat_map(|i| [((i / 16 + i % 16) % 2) as f32; 3]).collect();
        let a = ImageBuffer::new(16, 16, data).unwrap();
        let inv = a.map(|v| 1.0 - v);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        let small = ImageBuffer::filled(10, 10, [0.5; 3]).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    struct Fixed(Option<Vec<(f64, f64)>>);
    impl LandmarkDetector for Fixed {
        fn detect(&self, _: &ImageBuffer) -> Option<Vec<(f64, f64)>> {
            self.0.clone()
        }
    }

    #[test]
    fn lmse_paths() {
        let img = ImageBuffer::filled(4, 4, [0.5; 3]).unwrap();
        assert_eq!(lmse(&img, &img, &Fixed(None)), LMSE_CAP);
        assert_eq!(landmark_mse(&[(1.0, 1.0), (5.0, 2.0)], &[(4.0, 5.0), (8.0, 6.0)]), 25.0);
        assert_eq!(landmark_mse(&[(0.0, 0.0)], &[(100.0, 0.0)]), LMSE_CAP);
        assert_eq!(lmse(&img, &img, &Fixed(Some(vec![(1.0, 2.0)]))), 0.0);
    }

    #[test]
    fn cosine_bounds() {
        assert!((cosine_percent(&[0.6, 0.8], &[0.6, 0.8]) - 100.0).abs() < 1e-12);
        assert_eq!(cosine_percent(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }
}
