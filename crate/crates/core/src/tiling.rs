//! Arbitrary-size restoration with overlapping latent tiles.
//!
//! One full-size latent is kept. At every sampling step each tile is
//! denoised with its own LQ crop, its noise prediction is weighted by a
//! normalized Gaussian mask, the weighted predictions are accumulated in
//! row-major tile order, and the global DDPM step is applied.

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{Denoiser, PersonalizationState};
use crate::diffusion::{self, NoiseSchedule, SamplerConfig};
use crate::error::invalid;
use crate::image::ImageBuffer;
use crate::latent::{self, LatentCode};
use crate::tensor::Scalar;
use crate::Result;

/// A tile rectangle in latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tile {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub overlap: usize,
    pub tiles: Vec<Tile>,
    /// Raw mask of every tile, row-major over the tile.
    pub masks: Vec<Vec<f64>>,
    /// Sum of raw masks at every latent pixel.
    pub normalization: Vec<f64>,
    /// `mask / normalization` of every tile.
    pub weights: Vec<Vec<f64>>,
}

/// Origins along one axis: stride `tile - overlap`, last tile clamped to the border.
pub fn axis_origins(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let t = tile.min(n);
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let p = pos.min(n - t);
        if out.last() != Some(&p) {
            out.push(p);
        }
        if pos + t >= n {
            break;
        }
        pos += stride;
    }
    out
}

fn gaussian(len: usize, sigma: Option<f64>) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    (0..len)
        .map(|i| match sigma {
            Some(s) => libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * s * s)),
            None => 1.0,
        })
        .collect()
}

/// Plan with Gaussian masks of standard deviation `tile / 4`.
pub fn plan_tiles(h: usize, w: usize, tile: usize, overlap: usize) -> Result<TilePlan> {
    plan_tiles_with(h, w, tile, overlap, Some(tile as f64 / 4.0))
}

/// Plan with an explicit mask deviation; `None` gives constant masks.
pub fn plan_tiles_with(h: usize, w: usize, tile: usize, overlap: usize, sigma: Option<f64>) -> Result<TilePlan> {
    if h == 0 || w == 0 || tile == 0 {
        return Err(invalid!("plan dimensions and tile size must be positive"));
    }
    if overlap >= tile {
        return Err(invalid!("overlap {overlap} must be smaller than tile {tile}"));
    }
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(invalid!("mask sigma must be positive"));
        }
    }
    let (th, tw) = (tile.min(h), tile.min(w));
    let mut tiles = Vec::new();
    for &top in &axis_origins(h, tile, overlap) {
        for &left in &axis_origins(w, tile, overlap) {
            tiles.push(Tile { top, left, height: th, width: tw });
        }
    }
    let (gy, gx) = (gaussian(th, sigma), gaussian(tw, sigma));
    let mask: Vec<f64> = gy.iter().flat_map(|&a| gx.iter().map(move |&b| a * b)).collect();
    let mut normalization = vec![0.0; h * w];
    for t in &tiles {
        for y in 0..th {
            for x in 0..tw {
                normalization[(t.top + y) * w + t.left + x] += mask[y * tw + x];
            }
        }
    }
    let weights = tiles
        .iter()
        .map(|t| {
            (0..th * tw)
                .map(|i| mask[i] / normalization[(t.top + i / tw) * w + t.left + i % tw])
                .collect()
        })
        .collect();
    Ok(TilePlan { height: h, width: w, tile, overlap, masks: vec![mask; tiles.len()], tiles, normalization, weights })
}

impl TilePlan {
    /// `sum_k weight_k` at every latent pixel.
    pub fn weight_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.height * self.width];
        for (t, wts) in self.tiles.iter().zip(&self.weights) {
            for y in 0..t.height {
                for x in 0..t.width {
                    s[(t.top + y) * self.width + t.left + x] += wts[y * t.width + x];
                }
            }
        }
        s
    }

    /// Fuses per-tile latents (same order as `tiles`) into one full latent.
    pub fn fuse(&self, parts: &[LatentCode]) -> Result<LatentCode> {
        if parts.len() != self.tiles.len() {
            return Err(invalid!("expected {} tile predictions, got {}", self.tiles.len(), parts.len()));
        }
        let c = parts.first().map_or(0, |p| p.channels());
        let mut acc = LatentCode::zeros(self.height, self.width, c);
        for ((t, wts), p) in self.tiles.iter().zip(&self.weights).zip(parts) {
            if p.shape() != (t.height, t.width, c) {
                return Err(invalid!("tile prediction {:?} does not match tile {:?}", p.shape(), t));
            }
            for y in 0..t.height {
                for x in 0..t.width {
                    let wt = wts[y * t.width + x];
                    let dst = ((t.top + y) * self.width + t.left + x) * c;
                    let src = (y * t.width + x) * c;
                    for k in 0..c {
                        acc.data_mut()[dst + k] += wt * p.data()[src + k];
                    }
                }
            }
        }
        Ok(acc)
    }
}

/// Tiled counterpart of [`diffusion::sample`]. Plan coordinates are latent
/// pixels (half the image resolution).
pub fn restore_tiled<T: Scalar>(
    model: &Denoiser<T>,
    lq: &ImageBuffer,
    pstate: Option<&PersonalizationState<T>>,
    cfg: &SamplerConfig,
    plan: &TilePlan,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    let shape = latent::encode(lq)?.shape();
    if (shape.0, shape.1) != (plan.height, plan.width) {
        return Err(invalid!("plan {}x{} does not match latent {}x{}", plan.height, plan.width, shape.0, shape.1));
    }
    let f = latent::DEFAULT_FACTOR;
    let crops = plan
        .tiles
        .iter()
        .map(|t| lq.crop(t.top * f, t.left * f, t.height * f, t.width * f))
        .collect::<Result<Vec<_>>>()?;
    let tile_dims = plan.tiles.first().map(|t| (t.height * f, t.width * f)).expect("plans are non-empty");
    let z = diffusion::run_sampler(shape, sched, cfg, |z, t, ref_rng| {
        let refs = match pstate {
            Some(ps) => Some(diffusion::sampled_reference_features(model, ps, sched, tile_dims, t, ref_rng)?),
            None => None,
        };
        let mut parts = Vec::with_capacity(plan.tiles.len());
        for (tile, crop) in plan.tiles.iter().zip(&crops) {
            let zt = z.crop(tile.top, tile.left, tile.height, tile.width)?;
            parts.push(diffusion::guided_prediction(model, &zt, t, crop, refs.as_deref(), pstate, cfg)?);
        }
        plan.fuse(&parts)
    })?;
    latent::decode(&z)
}

/// Bicubic upscaling by `scale` followed by tiled restoration.
pub fn restore_upscaled<T: Scalar>(
    model: &Denoiser<T>,
    lq: &ImageBuffer,
    scale: usize,
    pstate: Option<&PersonalizationState<T>>,
    cfg: &SamplerConfig,
    tile: usize,
    overlap: usize,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    let (h, w) = lq.dims();
    let up = lq.resize_bicubic(h * scale, w * scale)?;
    let f = latent::DEFAULT_FACTOR;
    let plan = plan_tiles(h * scale / f, w * scale / f, tile, overlap)?;
    restore_tiled(model, &up, pstate, cfg, &plan, sched)
}
