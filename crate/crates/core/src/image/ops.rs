//! Resampling and spatial filters on [`ImageBuffer`].
//!
//! Borders use reflect-101 padding (`dcb|abcd|cba`) throughout.

use alloc::vec;
use alloc::vec::Vec;

use super::{from_planes, to_planes, ImageBuffer, CHANNELS};
use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Interpolation {
    Bilinear,
    Bicubic,
}

/// Reflect-101 index into `[0, n)`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn resize(img: &ImageBuffer, height: usize, width: usize, interp: Interpolation) -> Result<ImageBuffer> {
    if height == 0 || width == 0 {
        return Err(invalid!("resize target must be positive, got {height}x{width}"));
    }
    if (height, width) == img.dims() {
        return Ok(img.clone());
    }
    let rows = axis_weights(img.height(), height, interp);
    let cols = axis_weights(img.width(), width, interp);
    let mut data = vec![0.0f32; height * width * CHANNELS];
    let src = img.data();
    let sw = img.width();
    for (y, (ry, wy)) in rows.iter().enumerate() {
        for (x, (rx, wx)) in cols.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (&sy, &ky) in ry.iter().zip(wy) {
                for (&sx, &kx) in rx.iter().zip(wx) {
                    let k = ky * kx;
                    let base = (sy * sw + sx) * CHANNELS;
                    for c in 0..CHANNELS {
                        acc[c] += k * src[base + c] as f64;
                    }
                }
            }
            let o = (y * width + x) * CHANNELS;
            for c in 0..CHANNELS {
                data[o + c] = acc[c] as f32;
            }
        }
    }
    ImageBuffer::from_clamped(height, width, data)
}

/// Source taps and weights for each output coordinate, half-pixel centers,
/// edge-clamped.
fn axis_weights(src: usize, dst: usize, interp: Interpolation) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            match interp {
                Interpolation::Bilinear => {
                    let pos = pos.clamp(0.0, (src - 1) as f64);
                    let i0 = libm::floor(pos) as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    let f = pos - i0 as f64;
                    (vec![i0, i1], vec![1.0 - f, f])
                }
                Interpolation::Bicubic => {
                    let base = libm::floor(pos) as isize;
                    let f = pos - base as f64;
                    let mut idx = Vec::with_capacity(4);
                    let mut w = Vec::with_capacity(4);
                    for k in -1..=2isize {
                        idx.push((base + k).clamp(0, src as isize - 1) as usize);
                        w.push(cubic(f - k as f64));
                    }
                    (idx, w)
                }
            }
        })
        .collect()
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized 1-D Gaussian kernel of odd length.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution: `row_kernel` along x, then `col_kernel` along y.
pub fn convolve_separable(img: &ImageBuffer, row_kernel: &[f64], col_kernel: &[f64]) -> ImageBuffer {
    let (h, w) = img.dims();
    let planes = to_planes(img);
    let rr = (row_kernel.len() / 2) as isize;
    let cr = (col_kernel.len() / 2) as isize;
    let out = planes.map(|p| {
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, &kv) in row_kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - rr, w);
                    acc += kv * p[y * w + sx] as f64;
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, &kv) in col_kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - cr, h);
                    acc += kv * tmp[sy * w + x] as f64;
                }
                out[y * w + x] = acc as f32;
            }
        }
        out
    });
    from_planes(h, w, &out)
}

/// Dense 2-D convolution with a square odd-sized kernel (row-major).
pub fn convolve_2d(img: &ImageBuffer, kernel: &[f64], size: usize) -> ImageBuffer {
    debug_assert_eq!(kernel.len(), size * size);
    let (h, w) = img.dims();
    let r = (size / 2) as isize;
    let planes = to_planes(img);
    let taps: Vec<(isize, isize, f64)> = (0..size)
        .flat_map(|ky| (0..size).map(move |kx| (ky, kx)))
        .filter_map(|(ky, kx)| {
            let v = kernel[ky * size + kx];
            (v != 0.0).then_some((ky as isize - r, kx as isize - r, v))
        })
        .collect();
    let out = planes.map(|p| {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, v) in &taps {
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    acc += v * p[sy * w + sx] as f64;
                }
                out[y * w + x] = acc as f32;
            }
        }
        out
    });
    from_planes(h, w, &out)
}

/// Per-channel median over a `size x size` window.
pub fn median_filter(img: &ImageBuffer, size: usize) -> ImageBuffer {
    let (h, w) = img.dims();
    let r = (size / 2) as isize;
    let planes = to_planes(img);
    let mut window = Vec::with_capacity(size * size);
    let out = planes.map(|p| {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = reflect(y as isize + dy, h);
                        let sx = reflect(x as isize + dx, w);
                        window.push(p[sy * w + sx]);
                    }
                }
                window.sort_unstable_by(|a, b| a.total_cmp(b));
                out[y * w + x] = window[window.len() / 2];
            }
        }
        out
    });
    from_planes(h, w, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        let data = (0..h * w * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageBuffer::new(h, w, data).unwrap()
    }

    #[test]
    fn reflect_101() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(-9, 4), 3);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(5, 7);
        assert_eq!(resize(&img, 5, 7, Interpolation::Bilinear).unwrap(), img);
        let flat = ImageBuffer::filled(9, 9, [0.25, 0.5, 0.75]).unwrap();
        for interp in [Interpolation::Bilinear, Interpolation::Bicubic] {
            let r = resize(&flat, 4, 13, interp).unwrap();
            assert!(r.data().iter().zip([0.25, 0.5, 0.75].iter().cycle()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn filters_preserve_constants() {
        let flat = ImageBuffer::filled(8, 8, [0.3, 0.6, 0.9]).unwrap();
        let g = gaussian_kernel(1.5, 9);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(convolve_separable(&flat, &g, &g).max_abs_diff(&flat) < 1e-6);
        assert_eq!(median_filter(&flat, 5), flat);
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut data = vec![0.2f32; 7 * 7 * 3];
        data[(3 * 7 + 3) * 3] = 1.0;
        let img = ImageBuffer::new(7, 7, data).unwrap();
        let out = median_filter(&img, 3);
        assert_eq!(out.get(3, 3, 0), 0.2);
    }
}
