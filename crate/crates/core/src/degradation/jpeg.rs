//! Baseline JPEG compression artifacts without entropy coding.
//!
//! The lossy part of a baseline encoder is reproduced exactly: 8-bit
//! quantization, JFIF YCbCr, level shift, 8x8 DCT, quantization with the
//! standard tables scaled by quality, and the inverse path. Chroma is kept
//! at full resolution (4:4:4). Entropy coding is lossless and omitted.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{ImageBuffer, CHANNELS};

const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29,
    51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120,
    101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99,
];

/// Quality-scaled quantization table (quality in `1..=100`).
pub fn quant_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    base.map(|b| ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { libm::sqrt(0.125) } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * libm::cos((2 * x + 1) as f64 * u as f64 * core::f64::consts::PI / 16.0);
        }
    }
    c
}

fn round_byte(v: f64) -> f64 {
    libm::round(v).clamp(0.0, 255.0)
}

/// Round-trips `img` through JPEG quantization at `quality`.
pub fn compress(img: &ImageBuffer, quality: u8) -> ImageBuffer {
    let (h, w) = img.dims();
    let tables = [quant_table(&LUMA, quality), quant_table(&CHROMA, quality), quant_table(&CHROMA, quality)];
    let basis = dct_basis();

    let mut planes = [vec![0.0f64; h * w], vec![0.0f64; h * w], vec![0.0f64; h * w]];
    for (i, px) in img.data().chunks_exact(CHANNELS).enumerate() {
        let r = round_byte(px[0] as f64 * 255.0);
        let g = round_byte(px[1] as f64 * 255.0);
        let b = round_byte(px[2] as f64 * 255.0);
        planes[0][i] = round_byte(0.299 * r + 0.587 * g + 0.114 * b);
        planes[1][i] = round_byte(-0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 128.0);
        planes[2][i] = round_byte(0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 128.0);
    }

    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // edge replication for partial blocks
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                    }
                }
                // forward DCT: C * B * C^T
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u * 8 + x] = (0..8).map(|y| basis[u][y] * block[y * 8 + x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let c: f64 = (0..8).map(|x| tmp[u * 8 + x] * basis[v][x]).sum();
                        let q = table[u * 8 + v];
                        block[u * 8 + v] = libm::round(c / q) * q;
                    }
                }
                // inverse DCT: C^T * Q * C
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y * 8 + v] = (0..8).map(|u| basis[u][y] * block[u * 8 + v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = by + y;
                        let sx = bx + x;
                        if sy < h && sx < w {
                            let s: f64 = (0..8).map(|v| tmp[y * 8 + v] * basis[v][x]).sum();
                            plane[sy * w + sx] = round_byte(s + 128.0);
                        }
                    }
                }
            }
        }
    }

    let mut out: Vec<f32> = Vec::with_capacity(h * w * CHANNELS);
    for i in 0..h * w {
        let y = planes[0][i];
        let cb = planes[1][i] - 128.0;
        let cr = planes[2][i] - 128.0;
        let r = round_byte(y + 1.402 * cr);
        let g = round_byte(y - 0.344_136_286 * cb - 0.714_136_286 * cr);
        let b = round_byte(y + 1.772 * cb);
        out.extend([r, g, b].map(|v| (v / 255.0) as f32));
    }
    ImageBuffer::new(h, w, out).expect("bytes map into [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scaling_matches_reference_tables() {
        assert_eq!(quant_table(&LUMA, 50)[0], 16.0);
        assert!(quant_table(&LUMA, 100).iter().all(|&v| v == 1.0));
        // q = 10 -> scale 500
        assert_eq!(quant_table(&LUMA, 10)[0], 80.0);
        assert_eq!(quant_table(&CHROMA, 10)[63], 255.0);
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let c = dct_basis();
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = (0..8).map(|k| c[i][k] * c[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_quality_is_near_lossless_and_low_quality_is_not() {
        let data = (0..20 * 13 * 3).map(|i| ((i * 37) % 251) as f32 / 250.0).collect();
        let img = ImageBuffer::new(20, 13, data).unwrap();
        let hi = compress(&img, 100);
        assert_eq!(hi.dims(), (20, 13));
        assert!(hi.max_abs_diff(&img) < 0.02);
        assert!(compress(&img, 30).max_abs_diff(&img) > 0.05);
        assert_eq!(compress(&img, 55), compress(&img, 55));
    }
}
