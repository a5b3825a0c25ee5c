//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Parameters enter the graph by reference, so building a graph never
//! copies weights. Gradients are only propagated into nodes that
//! transitively depend on a leaf created with `requires_grad = true`;
//! frozen weights still pass gradients through to their inputs.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{strides, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, k: usize },
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    RmsNorm(Var),
    Softmax(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Mse(Var, Var),
    SumSq(Var),
    Sum(Var),
    Column(Var, usize),
    DivByMax(Var),
    ScatterRow { base: Var, row: Var, index: usize },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Op-specific saved state (im2col buffer, normalization statistics, argmax).
    saved: Vec<T>,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Tensor<T>>>,
}

const NORM_EPS: f64 = 1e-5;

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool, saved: Vec<T>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn node(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg, Vec::new())
    }

    /// A borrowed leaf, typically a weight.
    pub fn param(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad, Vec::new())
    }

    /// An owned leaf.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Same-padded `k x k` convolution (`k` odd). `w` is a
    /// `(k*k*c_in) x c_out` matrix indexed by `(ky*k + kx)*c_in + ci`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Var {
        let xv = self.value(x);
        let (h, wd, cin) = xv.shape();
        let wv = self.value(w);
        let kk = k * k * cin;
        assert!(k % 2 == 1, "conv kernel must be odd");
        assert_eq!(wv.rows(), kk, "conv weight rows");
        let cout = wv.channels();
        let n = h * wd;
        let mut out = vec![T::zero(); n * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv bias length");
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let keep_cols = self.requires_grad(w);
        let cols = if k == 1 { Vec::new() } else { im2col(xv, k) };
        let a: &[T] = if k == 1 { xv.data() } else { &cols };
        T::gemm(n, kk, cout, T::one(), a, strides(kk, false), wv.data(), strides(cout, false), beta, &mut out);
        let rg = self.requires_grad(x) || keep_cols || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(h, wd, cout, out).expect("conv shape");
        let saved = if keep_cols { cols } else { Vec::new() };
        self.push(Cow::Owned(value), Op::Conv { x, w, b, k }, rg, saved)
    }

    /// `a (m x k) * b (k x n)`, or `a * b^T` for `b (n x k)` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, kd) = (av.rows(), av.channels());
        let (n, bs) = if transpose_b {
            assert_eq!(bv.channels(), kd, "matmul inner dims");
            (bv.rows(), strides(kd, true))
        } else {
            assert_eq!(bv.rows(), kd, "matmul inner dims");
            (bv.channels(), strides(bv.channels(), false))
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, kd, n, T::one(), av.data(), strides(kd, false), bv.data(), bs, T::zero(), &mut out);
        let value = Tensor::new(av.height(), av.width(), n, out).expect("matmul shape");
        self.node(value, Op::MatMul { a, b, transpose_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.node(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.node(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.node(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a single-row tensor to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let v = broadcast_rows(self.value(x), self.value(r), |a, b| a + b);
        self.node(v, Op::AddRow(x, r), &[x, r])
    }

    /// Multiplies every row of `x` elementwise by a single-row tensor.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let v = broadcast_rows(self.value(x), self.value(r), |a, b| a * b);
        self.node(v, Op::MulRow(x, r), &[x, r])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x).map(|a| a * s);
        self.node(v, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.node(v, Op::Silu(x), &[x])
    }

    /// Group normalization over all rows with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        assert!(groups > 0 && c.is_multiple_of(groups), "group count must divide channels");
        let cg = c / groups;
        let count = T::of((xv.rows() * cg) as f64);
        let eps = T::of(NORM_EPS);
        let mut stats = vec![T::zero(); 2 * groups];
        for g in 0..groups {
            let mut sum = T::zero();
            for row in xv.data().chunks_exact(c) {
                for &v in &row[g * cg..(g + 1) * cg] {
                    sum = sum + v;
                }
            }
            let mean = sum / count;
            let mut var = T::zero();
            for row in xv.data().chunks_exact(c) {
                for &v in &row[g * cg..(g + 1) * cg] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            stats[2 * g] = mean;
            stats[2 * g + 1] = T::one() / (var / count + eps).sqrt();
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            for (ch, &v) in row.iter().enumerate() {
                let g = ch / cg;
                out.push((v - stats[2 * g]) * stats[2 * g + 1] * gv[ch] + bv[ch]);
            }
        }
        let (h, w, _) = xv.shape();
        let value = Tensor::new(h, w, c, out).expect("norm shape");
        let rg = [x, gamma, beta].iter().any(|v| self.requires_grad(*v));
        self.push(Cow::Owned(value), Op::GroupNorm { x, gamma, beta, groups }, rg, stats)
    }

    /// Parameter-free RMS normalization of every row.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let mut out = Vec::with_capacity(xv.len());
        let mut saved = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks_exact(c) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / T::of(c as f64);
            let r = T::one() / (ms + T::of(NORM_EPS)).sqrt();
            saved.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        let (h, w, _) = xv.shape();
        let value = Tensor::new(h, w, c, out).expect("norm shape");
        let rg = self.requires_grad(x);
        self.push(Cow::Owned(value), Op::RmsNorm(x), rg, saved)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s = s + e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / s;
            }
        }
        let (h, w, _) = xv.shape();
        let value = Tensor::new(h, w, c, out).expect("softmax shape");
        self.node(value, Op::Softmax(x), &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w, c) = xv.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); ho * wo * c];
        let d = xv.data();
        for y in 0..ho {
            for x in 0..wo {
                let o = (y * wo + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + d[i + ch];
                    }
                }
                for v in &mut out[o..o + c] {
                    *v = *v * quarter;
                }
            }
        }
        let value = Tensor::new(ho, wo, c, out).expect("pool shape");
        self.node(value, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (h, w, c) = xv.shape();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(ho * wo * c);
        for y in 0..ho {
            for x in 0..wo {
                let i = ((y / 2) * w + x / 2) * c;
                out.extend_from_slice(&xv.data()[i..i + c]);
            }
        }
        let value = Tensor::new(ho, wo, c, out).expect("upsample shape");
        self.node(value, Op::Upsample2(x), &[x])
    }

    /// Mean squared difference, as a 1-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "mse shape mismatch");
        let s = av.data().iter().zip(bv.data()).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        let v = scalar_tensor(s / T::of(av.len() as f64));
        self.node(v, Op::Mse(a, b), &[a, b])
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v * v);
        self.node(scalar_tensor(s), Op::SumSq(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v);
        self.node(scalar_tensor(s), Op::Sum(x), &[x])
    }

    /// Channel `j` of every row, shaped `h x w x 1`.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        assert!(j < c, "column index out of range");
        let data = xv.data().chunks_exact(c).map(|r| r[j]).collect();
        let value = Tensor::new(xv.height(), xv.width(), 1, data).expect("column shape");
        self.node(value, Op::Column(x, j), &[x])
    }

    /// `x / max(x)`; the caller guarantees a positive maximum.
    pub fn div_by_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (arg, m) = xv
            .data()
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
        let value = xv.map(|v| v / m);
        let rg = self.requires_grad(x);
        self.push(Cow::Owned(value), Op::DivByMax(x), rg, vec![T::of(arg as f64)])
    }

    /// `base` with row `index` replaced by the single-row tensor `row`.
    pub fn scatter_row(&mut self, base: Var, row: Var, index: usize) -> Var {
        let bv = self.value(base);
        let rv = self.value(row);
        let c = bv.channels();
        assert_eq!(rv.len(), c, "scatter row width");
        assert!(index < bv.rows(), "scatter row index");
        let mut value = bv.clone();
        value.data_mut()[index * c..(index + 1) * c].copy_from_slice(rv.data());
        self.node(value, Op::ScatterRow { base, row, index }, &[base, row])
    }

    /// Accumulates d`loss`/d(leaf) for every leaf that requires a gradient.
    /// `loss` must be a 1-element tensor.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar_tensor(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        match node.op.clone() {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let xv = val(x);
                let wv = val(w);
                let (h, wd, cin) = xv.shape();
                let n = h * wd;
                let kk = k * k * cin;
                let cout = wv.channels();
                if let Some(b) = b.filter(|b| rg(*b)) {
                    accumulate(grads, b, column_sums(g, 1, 1));
                }
                if rg(w) {
                    let a: &[T] = if k == 1 { xv.data() } else { &node.saved };
                    let mut dw = vec![T::zero(); kk * cout];
                    T::gemm(kk, n, cout, T::one(), a, strides(kk, true), g.data(), strides(cout, false), T::zero(), &mut dw);
                    accumulate(grads, w, Tensor::new(wv.height(), wv.width(), cout, dw).expect("dw"));
                }
                if rg(x) {
                    let mut dcols = vec![T::zero(); n * kk];
                    T::gemm(n, cout, kk, T::one(), g.data(), strides(cout, false), wv.data(), strides(cout, true), T::zero(), &mut dcols);
                    let dx = if k == 1 { dcols } else { col2im(&dcols, h, wd, cin, k) };
                    accumulate(grads, x, Tensor::new(h, wd, cin, dx).expect("dx"));
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let av = val(a);
                let bv = val(b);
                let (m, kd) = (av.rows(), av.channels());
                let n = g.channels();
                if rg(a) {
                    let mut da = vec![T::zero(); m * kd];
                    let bs = if transpose_b { strides(kd, false) } else { strides(n, true) };
                    T::gemm(m, n, kd, T::one(), g.data(), strides(n, false), bv.data(), bs, T::zero(), &mut da);
                    accumulate(grads, a, Tensor::new(av.height(), av.width(), kd, da).expect("da"));
                }
                if rg(b) {
                    let mut db = vec![T::zero(); kd * n];
                    if transpose_b {
                        T::gemm(n, m, kd, T::one(), g.data(), strides(n, true), av.data(), strides(kd, false), T::zero(), &mut db);
                    } else {
                        T::gemm(kd, m, n, T::one(), av.data(), strides(kd, true), g.data(), strides(n, false), T::zero(), &mut db);
                    }
                    let (h, w, c) = bv.shape();
                    accumulate(grads, b, Tensor::new(h, w, c, db).expect("db"));
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if rg(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                }
                if rg(b) {
                    accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::AddRow(x, r) => {
                if rg(x) {
                    accumulate(grads, x, g.clone());
                }
                if rg(r) {
                    let rv = val(r);
                    accumulate(grads, r, column_sums(g, rv.height(), rv.width()));
                }
            }
            Op::MulRow(x, r) => {
                let rv = val(r);
                if rg(x) {
                    accumulate(grads, x, broadcast_rows(g, rv, |a, b| a * b));
                }
                if rg(r) {
                    let prod = g.zip_map(val(x), |a, b| a * b);
                    accumulate(grads, r, column_sums(&prod, rv.height(), rv.width()));
                }
            }
            Op::Scale(x, s) => accumulate(grads, x, g.map(|v| v * s)),
            Op::Silu(x) => {
                let d = g.zip_map(val(x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                accumulate(grads, x, d);
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let xv = val(x);
                let gv = val(gamma).data();
                let c = xv.channels();
                let cg = c / groups;
                let stats = &node.saved;
                let xhat = |ch: usize, v: T| (v - stats[2 * (ch / cg)]) * stats[2 * (ch / cg) + 1];
                if rg(gamma) || rg(beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (grow, xrow) in g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                        for ch in 0..c {
                            dg[ch] = dg[ch] + grow[ch] * xhat(ch, xrow[ch]);
                            db[ch] = db[ch] + grow[ch];
                        }
                    }
                    if rg(gamma) {
                        accumulate(grads, gamma, Tensor::new(1, 1, c, dg).expect("dgamma"));
                    }
                    if rg(beta) {
                        accumulate(grads, beta, Tensor::new(1, 1, c, db).expect("dbeta"));
                    }
                }
                if rg(x) {
                    let count = T::of((xv.rows() * cg) as f64);
                    let mut m1 = vec![T::zero(); groups];
                    let mut m2 = vec![T::zero(); groups];
                    for (grow, xrow) in g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                        for ch in 0..c {
                            let dxh = grow[ch] * gv[ch];
                            m1[ch / cg] = m1[ch / cg] + dxh;
                            m2[ch / cg] = m2[ch / cg] + dxh * xhat(ch, xrow[ch]);
                        }
                    }
                    for gi in 0..groups {
                        m1[gi] = m1[gi] / count;
                        m2[gi] = m2[gi] / count;
                    }
                    let mut dx = Vec::with_capacity(xv.len());
                    for (grow, xrow) in g.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                        for ch in 0..c {
                            let gi = ch / cg;
                            let dxh = grow[ch] * gv[ch];
                            dx.push(stats[2 * gi + 1] * (dxh - m1[gi] - xhat(ch, xrow[ch]) * m2[gi]));
                        }
                    }
                    let (h, w, _) = xv.shape();
                    accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
                }
            }
            Op::RmsNorm(x) => {
                let y = &node.value;
                let c = y.channels();
                let mut dx = Vec::with_capacity(y.len());
                for ((grow, yrow), &r) in g.data().chunks_exact(c).zip(y.data().chunks_exact(c)).zip(&node.saved) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&a, &b)| s + a * b) / T::of(c as f64);
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| r * (gv - yv * dot)));
                }
                let (h, w, _) = y.shape();
                accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.channels();
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks_exact(c).zip(y.data().chunks_exact(c)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                let (h, w, _) = y.shape();
                accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
            }
            Op::AvgPool2(x) => {
                let (h, w, c) = val(x).shape();
                let wo = w / 2;
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / 2) * wo + xx / 2) * c;
                        let i = (y * w + xx) * c;
                        for ch in 0..c {
                            dx[i + ch] = g.data()[o + ch] * quarter;
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
            }
            Op::Upsample2(x) => {
                let (h, w, c) = val(x).shape();
                let wo = 2 * w;
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..2 * h {
                    for xx in 0..wo {
                        let o = ((y / 2) * w + xx / 2) * c;
                        let i = (y * wo + xx) * c;
                        for ch in 0..c {
                            dx[o + ch] = dx[o + ch] + g.data()[i + ch];
                        }
                    }
                }
                accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
            }
            Op::Mse(a, b) => {
                let av = val(a);
                let k = g.data()[0] * T::of(2.0 / av.len() as f64);
                let diff = av.zip_map(val(b), |x, y| (x - y) * k);
                if rg(b) {
                    accumulate(grads, b, diff.map(|v| -v));
                }
                if rg(a) {
                    accumulate(grads, a, diff);
                }
            }
            Op::SumSq(x) => {
                let k = g.data()[0] * T::of(2.0);
                accumulate(grads, x, val(x).map(|v| v * k));
            }
            Op::Sum(x) => {
                let k = g.data()[0];
                let (h, w, c) = val(x).shape();
                accumulate(grads, x, Tensor::filled(h, w, c, k));
            }
            Op::Column(x, j) => {
                let (h, w, c) = val(x).shape();
                let mut dx = vec![T::zero(); h * w * c];
                for (r, &gv) in g.data().iter().enumerate() {
                    dx[r * c + j] = gv;
                }
                accumulate(grads, x, Tensor::new(h, w, c, dx).expect("dx"));
            }
            Op::DivByMax(x) => {
                let xv = val(x);
                let arg = node.saved[0].f64() as usize;
                let m = xv.data()[arg];
                let dot = g.data().iter().zip(xv.data()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                let mut dx = g.map(|v| v / m);
                dx.data_mut()[arg] = dx.data()[arg] - dot / (m * m);
                accumulate(grads, x, dx);
            }
            Op::ScatterRow { base, row, index } => {
                let c = g.channels();
                if rg(row) {
                    let rv = val(row);
                    let d = g.data()[index * c..(index + 1) * c].to_vec();
                    accumulate(grads, row, Tensor::new(rv.height(), rv.width(), c, d).expect("drow"));
                }
                if rg(base) {
                    let mut d = g.clone();
                    d.data_mut()[index * c..(index + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                    accumulate(grads, base, d);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn scalar_tensor<T: Scalar>(v: T) -> Tensor<T> {
    Tensor::new(1, 1, 1, vec![v]).expect("scalar")
}

fn broadcast_rows<T: Scalar>(x: &Tensor<T>, r: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let c = x.channels();
    assert_eq!(r.len(), c, "row broadcast width");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        out.extend(row.iter().zip(r.data()).map(|(&a, &b)| f(a, b)));
    }
    let (h, w, _) = x.shape();
    Tensor::new(h, w, c, out).expect("broadcast shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let c = g.channels();
    let mut s = vec![T::zero(); c];
    for row in g.data().chunks_exact(c) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    Tensor::new(h, w, c, s).expect("column sums")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Rows are output pixels, columns `(ky*k + kx)*c + ci`; zero padding.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (h, w, c) = x.shape();
    let r = (k / 2) as isize;
    let kk = k * k * c;
    let mut cols = vec![T::zero(); h * w * kk];
    let d = x.data();
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * kk;
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&d[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let kk = k * k * c;
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * kk;
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for ch in 0..c {
                        dx[dst + ch] = dx[dst + ch] + cols[src + ch];
                    }
                }
            }
        }
    }
    dx
}
