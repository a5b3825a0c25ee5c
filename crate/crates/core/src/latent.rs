//! Exact invertible latent space: space-to-depth by a factor `f` followed by
//! the affine map `v -> 2v - 1`.

use alloc::vec;

use crate::error::invalid;
use crate::image::{ImageBuffer, CHANNELS};
use crate::tensor::Tensor;
use crate::Result;

/// An `(H/f) x (W/f) x 3f^2` latent. Channel index within a cell is
/// `(dy*f + dx)*3 + c`. Double precision makes `2v - 1` exact for every
/// image component.
pub type LatentCode = Tensor<f64>;

pub const DEFAULT_FACTOR: usize = 2;

pub fn encode(img: &ImageBuffer) -> Result<LatentCode> {
    encode_with(img, DEFAULT_FACTOR)
}

pub fn decode(z: &LatentCode) -> Result<ImageBuffer> {
    decode_with(z, DEFAULT_FACTOR)
}

pub fn latent_channels(factor: usize) -> usize {
    CHANNELS * factor * factor
}

pub fn encode_with(img: &ImageBuffer, f: usize) -> Result<LatentCode> {
    let (h, w) = img.dims();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(invalid!("image {h}x{w} not divisible by latent factor {f}"));
    }
    let (lh, lw, lc) = (h / f, w / f, latent_channels(f));
    let mut out = vec![0.0f64; lh * lw * lc];
    let src = img.data();
    for y in 0..h {
        for x in 0..w {
            let cell = ((y / f) * lw + x / f) * lc + ((y % f) * f + x % f) * CHANNELS;
            let p = (y * w + x) * CHANNELS;
            for c in 0..CHANNELS {
                out[cell + c] = 2.0 * src[p + c] as f64 - 1.0;
            }
        }
    }
    Tensor::new(lh, lw, lc, out)
}

/// Inverse of [`encode_with`]; values mapping outside `[0, 1]` are clamped.
pub fn decode_with(z: &LatentCode, f: usize) -> Result<ImageBuffer> {
    let (lh, lw, lc) = z.shape();
    if f == 0 || lc != latent_channels(f) {
        return Err(invalid!("latent has {lc} channels, factor {f} needs {}", latent_channels(f)));
    }
    let (h, w) = (lh * f, lw * f);
    let mut out = vec![0.0f32; h * w * CHANNELS];
    let src = z.data();
    for y in 0..h {
        for x in 0..w {
            let cell = ((y / f) * lw + x / f) * lc + ((y % f) * f + x % f) * CHANNELS;
            let p = (y * w + x) * CHANNELS;
            for c in 0..CHANNELS {
                out[p + c] = ((src[cell + c] + 1.0) * 0.5) as f32;
            }
        }
    }
    ImageBuffer::from_clamped(h, w, out)
}
