//! The pixel container shared by every module, plus resampling and filtering.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::Result;

pub mod ops;

pub const CHANNELS: usize = 3;

/// Smallest non-zero component an image stores (2^-29).
pub const MIN_POSITIVE: f32 = 1.862_645_1e-9;

/// An `height x width` RGB image with interleaved `f32` components in `[0, 1]`.
///
/// Components below [`MIN_POSITIVE`] are flushed to zero on construction,
/// which keeps the latent round trip exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(invalid!(
                "expected {} components for {height}x{width}, got {}",
                height * width * CHANNELS,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(invalid!("pixel component {v} outside [0, 1]"));
        }
        for v in &mut data {
            if *v < MIN_POSITIVE {
                *v = 0.0;
            }
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    /// Applies `f` to every component and clamps the result.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_clamped(self.height, self.width, data).expect("dimensions preserved")
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(invalid!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in top..top + height {
            let start = (y * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Ok(Self { height, width, data })
    }

    /// Per-pixel luma (BT.601 weights).
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        ops::resize(self, height, width, ops::Interpolation::Bilinear)
    }

    pub fn resize_bicubic(&self, height: usize, width: usize) -> Result<Self> {
        ops::resize(self, height, width, ops::Interpolation::Bicubic)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Planar scratch representation used by the filters: one `Vec<f32>` per channel.
pub(crate) fn to_planes(img: &ImageBuffer) -> [Vec<f32>; 3] {
    let n = img.height * img.width;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, p) in img.data.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            planes[c][i] = p[c];
        }
    }
    planes
}

pub(crate) fn from_planes(height: usize, width: usize, planes: &[Vec<f32>; 3]) -> ImageBuffer {
    let mut data = Vec::with_capacity(height * width * CHANNELS);
    for i in 0..height * width {
        for plane in planes {
            data.push(plane[i]);
        }
    }
    ImageBuffer::from_clamped(height, width, data).expect("planes match dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_dims() {
        assert!(ImageBuffer::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageBuffer::new(0, 1, vec![]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![f32::NAN, 0.0, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| i as f32 / 48.0).collect();
        let img = ImageBuffer::new(4, 4, data).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 3));
        assert!(img.crop(3, 3, 2, 2).is_err());
    }
}
