//! Synthetic faces with analytic identity and landmark ground truth.
//!
//! A face is a parameter vector rendered with anti-aliased signed distances:
//! a shaded skin ellipse over a fixed background gradient, two eyes, two
//! brows and a curved mouth. The identity of an image is its parameter
//! vector; landmarks follow analytically from it. [`fit`] inverts the
//! renderer by damped Gauss-Newton, which gives the image-side identity
//! embedder and landmark detector used by the metrics.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::invalid;
use crate::image::{ops, ImageBuffer};
use crate::rng;
use crate::Result;

pub const PARAM_COUNT: usize = 14;

/// Documented range of every component, in vector order.
pub const PARAM_RANGES: [(&str, f64, f64); PARAM_COUNT] = [
    ("skin_r", 0.45, 0.95),
    ("skin_g", 0.30, 0.80),
    ("skin_b", 0.20, 0.70),
    ("center_x", 0.44, 0.56),
    ("center_y", 0.44, 0.56),
    ("axis_x", 0.27, 0.38),
    ("axis_y", 0.33, 0.44),
    ("eye_spacing", 0.30, 0.55),
    ("eye_height", 0.10, 0.40),
    ("eye_size", 0.0, 0.06),
    ("mouth_height", 0.35, 0.65),
    ("mouth_width", 0.25, 0.60),
    ("mouth_curve", -1.0, 1.0),
    ("brow_angle", -0.5, 0.5),
];

/// Components that describe the person rather than where the face sits.
pub const IDENTITY_COMPONENTS: [usize; 12] = [0, 1, 2, 5, 6, 7, 8, 9, 10, 11, 12, 13];

const EYE_SIZE_SAMPLE_MIN: f64 = 0.015;
const JITTER_MAX: f64 = 0.03;

/// Face geometry and colour. Positions and sizes are fractions of the image
/// side; `eye_spacing`/`eye_height` are fractions of the face axes.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FaceParams {
    pub skin_r: f64,
    pub skin_g: f64,
    pub skin_b: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub axis_x: f64,
    pub axis_y: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_size: f64,
    pub mouth_height: f64,
    pub mouth_width: f64,
    pub mouth_curve: f64,
    pub brow_angle: f64,
}

impl FaceParams {
    pub fn from_array(v: [f64; PARAM_COUNT]) -> Self {
        Self {
            skin_r: v[0],
            skin_g: v[1],
            skin_b: v[2],
            center_x: v[3],
            center_y: v[4],
            axis_x: v[5],
            axis_y: v[6],
            eye_spacing: v[7],
            eye_height: v[8],
            eye_size: v[9],
            mouth_height: v[10],
            mouth_width: v[11],
            mouth_curve: v[12],
            brow_angle: v[13],
        }
    }

    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [
            self.skin_r,
            self.skin_g,
            self.skin_b,
            self.center_x,
            self.center_y,
            self.axis_x,
            self.axis_y,
            self.eye_spacing,
            self.eye_height,
            self.eye_size,
            self.mouth_height,
            self.mouth_width,
            self.mouth_curve,
            self.brow_angle,
        ]
    }

    /// Midpoint of every range.
    pub fn mean() -> Self {
        Self::from_array(PARAM_RANGES.map(|(_, lo, hi)| 0.5 * (lo + hi)))
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut v = PARAM_RANGES.map(|(_, lo, hi)| rng::uniform(rng, lo, hi));
        if v[9] < EYE_SIZE_SAMPLE_MIN {
            v[9] = rng::uniform(rng, EYE_SIZE_SAMPLE_MIN, PARAM_RANGES[9].2);
        }
        Self::from_array(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, (name, lo, hi)) in self.to_array().iter().zip(PARAM_RANGES) {
            if !(v.is_finite() && *v >= lo && *v <= hi) {
                return Err(invalid!("{name} = {v} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Identity components mapped to `[-1, 1]` by their ranges.
    pub fn standardized_identity(&self) -> Vec<f64> {
        let v = self.to_array();
        IDENTITY_COMPONENTS
            .iter()
            .map(|&i| {
                let (_, lo, hi) = PARAM_RANGES[i];
                (2.0 * (v[i] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            })
            .collect()
    }

    /// Unit-norm identity embedding.
    pub fn embedding(&self) -> Vec<f64> {
        let mut e = self.standardized_identity();
        let n = libm::sqrt(e.iter().map(|v| v * v).sum::<f64>());
        if n < 1e-12 {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[0] = 1.0;
        } else {
            e.iter_mut().for_each(|v| *v /= n);
        }
        e
    }

    fn geometry(&self, jitter: Jitter) -> Geometry {
        let cx = self.center_x + jitter.dx;
        let cy = self.center_y + jitter.dy;
        let eye_dx = self.eye_spacing * self.axis_x;
        let eye_y = cy - self.eye_height * self.axis_y;
        let mouth_y = cy + self.mouth_height * self.axis_y;
        Geometry {
            cx,
            cy,
            ax: self.axis_x,
            ay: self.axis_y,
            eyes: [(cx - eye_dx, eye_y), (cx + eye_dx, eye_y)],
            eye_r: self.eye_size,
            brow_y: eye_y - self.eye_size - 0.045,
            brow_angle: self.brow_angle,
            mouth: (cx, mouth_y),
            mouth_half_width: self.mouth_width * self.axis_x,
            mouth_bend: self.mouth_curve * 0.04,
        }
    }

    /// Left eye, right eye and mouth centre in pixel coordinates (pixel
    /// centres at integer positions) for an image of side `size`.
    pub fn landmarks(&self, size: usize, jitter: Jitter) -> [(f64, f64); 3] {
        let g = self.geometry(jitter);
        let s = size as f64;
        let px = |(u, v): (f64, f64)| (u * s - 0.5, v * s - 0.5);
        [px(g.eyes[0]), px(g.eyes[1]), px((g.mouth.0, g.mouth.1 + g.mouth_bend))]
    }
}

/// Small rigid offset of the whole face, in fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
}

impl Jitter {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::streams::JITTER);
        Self {
            dx: rng::uniform(&mut r, -JITTER_MAX, JITTER_MAX),
            dy: rng::uniform(&mut r, -JITTER_MAX, JITTER_MAX),
        }
    }
}

struct Geometry {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    eyes: [(f64, f64); 2],
    eye_r: f64,
    brow_y: f64,
    brow_angle: f64,
    mouth: (f64, f64),
    mouth_half_width: f64,
    mouth_bend: f64,
}

const EYE_COLOR: [f64; 3] = [0.08, 0.06, 0.06];
const BROW_COLOR: [f64; 3] = [0.16, 0.10, 0.08];
const MOUTH_COLOR: [f64; 3] = [0.55, 0.16, 0.16];
const BROW_HALF_LENGTH: f64 = 0.055;
const BROW_RADIUS: f64 = 0.012;
const MOUTH_RADIUS: f64 = 0.014;

/// Background colour at normalized height `v`. Identical for every identity.
pub fn background(v: f64) -> [f64; 3] {
    [0.18 + 0.08 * v, 0.22 + 0.08 * v, 0.30 + 0.06 * v]
}

#[inline]
fn coverage(dist_px: f64) -> f64 {
    (0.5 - dist_px).clamp(0.0, 1.0)
}

#[inline]
fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    if a > 0.0 {
        for c in 0..3 {
            dst[c] += a * (src[c] - dst[c]);
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let t = ((px * bx + py * by) / (bx * bx + by * by)).clamp(0.0, 1.0);
    libm::hypot(px - t * bx, py - t * by)
}

/// Renders `params` at `size x size` with the jitter derived from `seed`.
pub fn generate_face(params: &FaceParams, size: usize, seed: u64) -> Result<ImageBuffer> {
    render(params, size, Jitter::from_seed(seed))
}

pub fn render(params: &FaceParams, size: usize, jitter: Jitter) -> Result<ImageBuffer> {
    if size < 16 {
        return Err(invalid!("face size must be at least 16, got {size}"));
    }
    Ok(render_unchecked(params, size, jitter))
}

/// Per-pixel face-ellipse coverage (> 0 wherever skin contributes).
pub fn face_mask(params: &FaceParams, size: usize, jitter: Jitter) -> Vec<bool> {
    let g = params.geometry(jitter);
    let s = size as f64;
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            mask.push(ellipse_coverage(&g, u, v, s).0 > 0.0);
        }
    }
    mask
}

/// Returns (coverage, normalized radius k).
#[inline]
fn ellipse_coverage(g: &Geometry, u: f64, v: f64, s: f64) -> (f64, f64) {
    let du = u - g.cx;
    let dv = v - g.cy;
    let qx = du / g.ax;
    let qy = dv / g.ay;
    let k = libm::sqrt(qx * qx + qy * qy);
    let grad = libm::sqrt((qx / g.ax) * (qx / g.ax) + (qy / g.ay) * (qy / g.ay));
    let d = if grad < 1e-9 { -1.0 } else { k * (k - 1.0) / grad };
    (coverage(d * s), k)
}

fn render_unchecked(params: &FaceParams, size: usize, jitter: Jitter) -> ImageBuffer {
    let g = params.geometry(jitter);
    let s = size as f64;
    let skin = [params.skin_r, params.skin_g, params.skin_b];
    let brow_dir = [
        (libm::cos(g.brow_angle), libm::sin(g.brow_angle)),
        (libm::cos(-g.brow_angle), libm::sin(-g.brow_angle)),
    ];
    let eye_px = g.eye_r * s;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let v = (y as f64 + 0.5) / s;
        let bg = background(v);
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let mut px = bg;

            let (face_cov, k) = ellipse_coverage(&g, u, v, s);
            if face_cov > 0.0 {
                let shade = 1.0 - 0.12 * (k * k).min(1.0);
                blend(&mut px, [skin[0] * shade, skin[1] * shade, skin[2] * shade], face_cov);

                for (side, &(ex, _)) in g.eyes.iter().enumerate() {
                    // brow rotated by +angle on the left, mirrored on the right
                    let (c, sn) = brow_dir[side];
                    let sign = if side == 0 { 1.0 } else { -1.0 };
                    let a = (ex - BROW_HALF_LENGTH * c, g.brow_y - sign * BROW_HALF_LENGTH * sn);
                    let b = (ex + BROW_HALF_LENGTH * c, g.brow_y + sign * BROW_HALF_LENGTH * sn);
                    let d = (segment_distance((u, v), a, b) - BROW_RADIUS) * s;
                    blend(&mut px, BROW_COLOR, coverage(d));
                }

                if eye_px > 0.0 {
                    let fade = (2.0 * eye_px).min(1.0);
                    for &(ex, ey) in &g.eyes {
                        let d = (libm::hypot(u - ex, v - ey) - g.eye_r) * s;
                        blend(&mut px, EYE_COLOR, fade * coverage(d));
                    }
                }

                let (mx, my) = g.mouth;
                let hw = g.mouth_half_width;
                let t = (u - mx) / hw;
                let d = if t.abs() <= 1.0 {
                    let cy = my + g.mouth_bend * (1.0 - t * t);
                    let slope = -2.0 * g.mouth_bend * t / hw;
                    (v - cy).abs() / libm::sqrt(1.0 + slope * slope)
                } else {
                    let ex = mx + hw * t.signum();
                    libm::hypot(u - ex, v - my)
                };
                blend(&mut px, MOUTH_COLOR, coverage((d - MOUTH_RADIUS) * s));
            }
            data.extend(px.iter().map(|&c| c as f32));
        }
    }
    ImageBuffer::from_clamped(size, size, data).expect("square render")
}

/// Outcome of inverting the renderer on an image.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFit {
    /// Recovered parameters; any rigid offset is folded into the centre.
    pub params: FaceParams,
    /// Root-mean-square residual against the (lightly blurred) image.
    pub rms: f64,
}

/// RMS residual above which a fit counts as a detection failure.
pub const FIT_FAILURE_RMS: f64 = 0.10;
const MIN_FACE_FRACTION: f64 = 0.05;
const CENTER_SLACK: f64 = 0.05;

/// Recovers face parameters from a square image. Returns `None` when no
/// face-like foreground is present.
pub fn fit(img: &ImageBuffer) -> Option<FaceFit> {
    let (h, w) = img.dims();
    if h != w || h < 16 {
        return None;
    }
    let size = h;
    let s = size as f64;

    // foreground = pixels that differ from the known background
    let mut n = 0.0;
    let (mut su, mut sv, mut suu, mut svv) = (0.0, 0.0, 0.0, 0.0);
    let mut fg: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..size {
        let v = (y as f64 + 0.5) / s;
        let bg = background(v);
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let p = img.pixel(y, x);
            let diff = (0..3).map(|c| (p[c] as f64 - bg[c]).abs()).fold(0.0, f64::max);
            if diff > 0.12 {
                n += 1.0;
                su += u;
                sv += v;
                suu += u * u;
                svv += v * v;
                for c in 0..3 {
                    fg[c].push(p[c]);
                }
            }
        }
    }
    if n < MIN_FACE_FRACTION * s * s {
        return None;
    }
    let cu = su / n;
    let cv = sv / n;
    let var_u = (suu / n - cu * cu).max(0.0);
    let var_v = (svv / n - cv * cv).max(0.0);

    let mut init = FaceParams::mean();
    init.center_x = cu;
    init.center_y = cv;
    init.axis_x = 2.0 * libm::sqrt(var_u);
    init.axis_y = 2.0 * libm::sqrt(var_v);
    let median = |v: &mut Vec<f32>| {
        v.sort_unstable_by(|a, b| a.total_cmp(b));
        v[v.len() / 2] as f64 / 0.95
    };
    init.skin_r = median(&mut fg[0]);
    init.skin_g = median(&mut fg[1]);
    init.skin_b = median(&mut fg[2]);
    init.eye_size = 0.035;

    let bounds = fit_bounds();
    let mut theta = to_unit(&init, &bounds);

    let scale = s / 64.0;
    for sigma in [1.6 * scale, 0.6 * scale] {
        let target = blur(img, sigma);
        theta = levenberg_marquardt(&target, theta, &bounds, size, sigma, 20);
    }
    let params = from_unit(&theta, &bounds);
    let target = blur(img, 0.6 * scale);
    let rms = libm::sqrt(residual_sq(&target, &params, size, 0.6 * scale) / (s * s * 3.0));
    Some(FaceFit { params: clamp_to_ranges(params), rms })
}

fn fit_bounds() -> [(f64, f64); PARAM_COUNT] {
    let mut b = PARAM_RANGES.map(|(_, lo, hi)| (lo, hi));
    for i in [3, 4] {
        b[i].0 -= CENTER_SLACK;
        b[i].1 += CENTER_SLACK;
    }
    b
}

fn clamp_to_ranges(p: FaceParams) -> FaceParams {
    let mut v = p.to_array();
    for (x, (_, lo, hi)) in v.iter_mut().zip(PARAM_RANGES) {
        *x = x.clamp(lo, hi);
    }
    FaceParams::from_array(v)
}

fn to_unit(p: &FaceParams, bounds: &[(f64, f64); PARAM_COUNT]) -> [f64; PARAM_COUNT] {
    let v = p.to_array();
    core::array::from_fn(|i| ((v[i] - bounds[i].0) / (bounds[i].1 - bounds[i].0)).clamp(0.0, 1.0))
}

fn from_unit(t: &[f64; PARAM_COUNT], bounds: &[(f64, f64); PARAM_COUNT]) -> FaceParams {
    FaceParams::from_array(core::array::from_fn(|i| bounds[i].0 + t[i] * (bounds[i].1 - bounds[i].0)))
}

fn blur(img: &ImageBuffer, sigma: f64) -> Vec<f64> {
    let size = (2.0 * libm::ceil(3.0 * sigma) + 1.0) as usize;
    let k = ops::gaussian_kernel(sigma, size.max(3));
    ops::convolve_separable(img, &k, &k).data().iter().map(|&v| v as f64).collect()
}

fn render_blurred(params: &FaceParams, size: usize, sigma: f64) -> Vec<f64> {
    let img = render_unchecked(params, size, Jitter::default());
    blur(&img, sigma)
}

fn residual_sq(target: &[f64], params: &FaceParams, size: usize, sigma: f64) -> f64 {
    render_blurred(params, size, sigma)
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn levenberg_marquardt(
    target: &[f64],
    mut theta: [f64; PARAM_COUNT],
    bounds: &[(f64, f64); PARAM_COUNT],
    size: usize,
    sigma: f64,
    iterations: usize,
) -> [f64; PARAM_COUNT] {
    const STEP: f64 = 2e-3;
    let n = target.len();
    let residual = |t: &[f64; PARAM_COUNT]| -> Vec<f64> {
        render_blurred(&from_unit(t, bounds), size, sigma)
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect()
    };
    let mut r = residual(&theta);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut damping = 1e-2;
    let mut jac = vec![0.0; PARAM_COUNT * n];
    for _ in 0..iterations {
        for i in 0..PARAM_COUNT {
            let mut tp = theta;
            // step inward near the upper bound so the probe stays feasible
            let h = if tp[i] + STEP > 1.0 { -STEP } else { STEP };
            tp[i] += h;
            let rp = residual(&tp);
            for k in 0..n {
                jac[i * n + k] = (rp[k] - r[k]) / h;
            }
        }
        let mut jtj = [[0.0f64; PARAM_COUNT]; PARAM_COUNT];
        let mut jtr = [0.0f64; PARAM_COUNT];
        for i in 0..PARAM_COUNT {
            let ji = &jac[i * n..(i + 1) * n];
            jtr[i] = ji.iter().zip(&r).map(|(a, b)| a * b).sum();
            for j in i..PARAM_COUNT {
                let jj = &jac[j * n..(j + 1) * n];
                let v: f64 = ji.iter().zip(jj).map(|(a, b)| a * b).sum();
                jtj[i][j] = v;
                jtj[j][i] = v;
            }
        }
        let mut improved = false;
        for _ in 0..6 {
            let mut a = jtj;
            for i in 0..PARAM_COUNT {
                a[i][i] += damping * (jtj[i][i] + 1e-9);
            }
            let Some(delta) = solve(a, jtr.map(|v| -v)) else {
                damping *= 10.0;
                continue;
            };
            let mut cand = theta;
            for i in 0..PARAM_COUNT {
                cand[i] = (cand[i] + delta[i]).clamp(0.0, 1.0);
            }
            let rc = residual(&cand);
            let cc: f64 = rc.iter().map(|v| v * v).sum();
            if cc < cost {
                theta = cand;
                r = rc;
                cost = cc;
                damping = (damping / 3.0).max(1e-7);
                improved = true;
                break;
            }
            damping *= 4.0;
        }
        if !improved {
            break;
        }
    }
    theta
}

/// Gaussian elimination with partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_size() {
        assert!(generate_face(&FaceParams::mean(), 15, 0).is_err());
        assert!(generate_face(&FaceParams::mean(), 16, 0).is_ok());
    }

    #[test]
    fn deterministic_render() {
        let p = FaceParams::sample(&mut rng::stream(3, 0));
        assert_eq!(generate_face(&p, 64, 9).unwrap(), generate_face(&p, 64, 9).unwrap());
    }

    #[test]
    fn zero_eye_size_has_no_eyes() {
        let mut p = FaceParams::mean();
        p.eye_size = 0.0;
        let img = render(&p, 64, Jitter::default()).unwrap();
        let [(lx, ly), _, _] = p.landmarks(64, Jitter::default());
        let px = img.pixel(libm::round(ly) as usize, libm::round(lx) as usize);
        // skin-coloured, not the dark eye colour
        assert!(px[0] > 0.4, "{px:?}");
    }

    #[test]
    fn skin_change_confined_to_face_mask() {
        let mut a = FaceParams::mean();
        let mut b = a;
        a.skin_r = 0.5;
        b.skin_r = 0.9;
        b.skin_b = 0.3;
        let j = Jitter::from_seed(4);
        let ia = render(&a, 64, j).unwrap();
        let ib = render(&b, 64, j).unwrap();
        let mask = face_mask(&a, 64, j);
        let mut inside = 0;
        for (i, m) in mask.iter().enumerate() {
            let d = (0..3).map(|c| (ia.data()[i * 3 + c] - ib.data()[i * 3 + c]).abs()).fold(0.0, f32::max);
            if *m {
                inside += (d > 0.0) as usize;
            } else {
                assert_eq!(d, 0.0, "pixel {i} changed outside the face");
            }
        }
        assert!(inside > 500);
    }

    #[test]
    fn landmarks_shift_with_jitter() {
        let p = FaceParams::mean();
        let j = Jitter { dx: 0.02, dy: -0.01 };
        let a = p.landmarks(64, Jitter::default());
        let b = p.landmarks(64, j);
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pb.0 - pa.0 - 0.02 * 64.0).abs() < 1e-9);
            assert!((pb.1 - pa.1 + 0.01 * 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_recovers_clean_render() {
        let mut r = rng::stream(11, 0);
        for _ in 0..3 {
            let p = FaceParams::sample(&mut r);
            let j = Jitter::from_seed(r.random());
            let img = render(&p, 64, j).unwrap();
            let f = fit(&img).expect("face found");
            assert!(f.rms < 0.02, "rms {}", f.rms);
            let cos: f64 = p.embedding().iter().zip(f.params.embedding()).map(|(a, b)| a * b).sum();
            assert!(cos > 0.95, "cos {cos}");
            let truth = p.landmarks(64, j);
            let est = f.params.landmarks(64, Jitter::default());
            for (a, b) in truth.iter().zip(&est) {
                assert!(libm::hypot(a.0 - b.0, a.1 - b.1) < 1.0, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn fit_rejects_background() {
        let data: Vec<f32> = (0..64)
            .flat_map(|y| {
                let bg = background((y as f64 + 0.5) / 64.0);
                (0..64).flat_map(move |_| bg.map(|c| c as f32))
            })
            .collect();
        let img = ImageBuffer::new(64, 64, data).unwrap();
        assert!(fit(&img).is_none());
    }
}
