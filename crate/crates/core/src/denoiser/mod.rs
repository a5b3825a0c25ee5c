//! The noise-prediction network.
//!
//! A small U-shaped network over latents. Each encoder level is modulated by
//! features of a time-aware low-quality (LQ) encoder via spatial feature
//! transforms `h * (1 + scale) + shift`, where `scale` and `shift` are
//! bias-free 1x1 projections of the LQ features, so absent conditioning is
//! exactly the identity.
//!
//! The output is `sqrt(1 - abar_t) z_t + sqrt(abar_t) net(z_t)`: the body
//! predicts `v` and the skip carries `z_t`, which dominates the noise at
//! large `t`.
//!
//! Personalization blocks sit at the coarse encoder levels, the bottleneck
//! and the first decoder level. Each computes text cross-attention over the
//! prompt embeddings plus `lambda_att` times image cross-attention over
//! reference features taken at the same site, and is merged as
//! `F + gamma * P` with a per-channel gain `gamma`. Their weights, the gains
//! and the learnable `*` embedding live in [`PersonalizationState`]; the
//! base weights never change during personalization.
//!
//! Parameter names (base): `time.fc{1,2}.{w,b}`, `in.{w,b}`,
//! `down{i}.proj.{w,b}` (i > 0), `down{i}.res.*`, `down{i}.sft.{scale,shift}`,
//! `mid.res.*`, `up{i}.res.*`, `up{i}.proj.{w,b}` (i > 0), `out.norm.{g,b}`,
//! `out.conv.{w,b}`, `lq.in.{w,b}`, `lq.time.{w,b}`, `lq.mix.{w,b}`,
//! `lq.down{i}.{w,b}` (i > 0), `tokens.table`. A residual block `*.res` holds
//! `norm1.{g,b}`, `conv1.{w,b}`, `time.{w,b}`, `norm2.{g,b}`, `conv2.{w,b}`.
//!
//! Personalization names: `pers.{site}.{text,image}.{wq,wk,wv,wo}`,
//! `pers.{site}.gamma`, `star`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::diffusion;
use crate::error::invalid;
use crate::image::ImageBuffer;
use crate::latent;
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub mod params;
pub mod prompt;

pub use params::ParamStore;
pub use prompt::PromptTokens;

/// Coefficients of `eps = c_skip z_t + c_out net(z_t)` at step `t`:
/// `sqrt(1 - abar_t)` and `sqrt(abar_t)` under the default schedule, so the
/// network body predicts `v = sqrt(abar) eps - sqrt(1 - abar) z0`.
pub fn output_skip(t: usize) -> (f64, f64) {
    let ab = diffusion::default_alpha_bar(t);
    (libm::sqrt(1.0 - ab), libm::sqrt(ab))
}

/// Default weight of the image cross-attention path.
pub const DEFAULT_LAMBDA_ATT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    /// Latent channels in and out (`3 f^2`).
    pub latent_channels: usize,
    /// Feature channels per resolution level, finest first.
    pub channels: Vec<usize>,
    /// Sinusoidal timestep embedding width.
    pub time_dim: usize,
    /// Token embedding width.
    pub token_dim: usize,
    /// Attention head width `d_k`.
    pub head_dim: usize,
    /// Upper bound on group-norm groups.
    pub max_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: latent::latent_channels(latent::DEFAULT_FACTOR),
            channels: vec![32, 64, 64],
            time_dim: 64,
            token_dim: 32,
            head_dim: 32,
            max_groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// A narrow configuration for tests and gradient checks.
    pub fn toy() -> Self {
        Self { latent_channels: 12, channels: vec![4, 4], time_dim: 8, token_dim: 4, head_dim: 4, max_groups: 2 }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn vocab_size(&self) -> usize {
        prompt::VOCABULARY.len()
    }

    fn temb_dim(&self) -> usize {
        2 * self.time_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid!("channels must be non-empty and positive: {:?}", self.channels));
        }
        if self.latent_channels == 0 || self.head_dim == 0 || self.token_dim == 0 || self.max_groups == 0 {
            return Err(invalid!("latent channels, head/token dims and groups must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid!("time_dim must be even and >= 2"));
        }
        Ok(())
    }

    /// Personalization sites with their channel width and spatial stride.
    pub fn sites(&self) -> Vec<(Site, usize, usize)> {
        let l = self.levels();
        let mut s = Vec::new();
        for i in 1..l {
            s.push((Site::Down(i), self.channels[i], 1 << i));
        }
        s.push((Site::Mid, self.channels[l - 1], 1 << (l - 1)));
        for i in (1..l.saturating_sub(1)).rev() {
            s.push((Site::Up(i), self.channels[i], 1 << i));
        }
        s
    }

    fn groups(&self, c: usize) -> usize {
        (1..=self.max_groups.min(c)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Down(usize),
    Mid,
    Up(usize),
}

impl Site {
    pub fn name(&self) -> String {
        match self {
            Site::Down(i) => format!("down{i}"),
            Site::Mid => "mid".into(),
            Site::Up(i) => format!("up{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Sft {
    scale: Conv,
    shift: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<(Option<Conv>, ResBlock, Sft)>,
    mid: ResBlock,
    up: Vec<(ResBlock, Option<Conv>)>,
    out_norm: Norm,
    conv_out: Conv,
    lq_in: Conv,
    lq_time: Linear,
    lq_mix: Conv,
    lq_down: Vec<Conv>,
    tokens: usize,
}

struct Builder<'r, T: Scalar, R: Rng> {
    store: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let data = (0..rows * cols).map(|_| T::of(std * rng::normal(self.rng))).collect();
        self.store.push(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) -> usize {
        self.store.push(name, Tensor::filled(1, 1, cols, T::of(v)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, gain: f64) -> Conv {
        let fan_in = k * k * cin;
        let w = self.tensor(format!("{name}.w"), fan_in, cout, gain / libm::sqrt(fan_in as f64));
        let b = bias.then(|| self.constant(format!("{name}.b"), cout, 0.0));
        Conv { w, b, k }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let w = self.tensor(format!("{name}.w"), cin, cout, 1.0 / libm::sqrt(cin as f64));
        let b = self.constant(format!("{name}.b"), cout, 0.0);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> Norm {
        let g = self.constant(format!("{name}.g"), c, 1.0);
        let b = self.constant(format!("{name}.b"), c, 0.0);
        Norm { g, b, groups }
    }

    fn res(&mut self, name: &str, c: usize, temb: usize, groups: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c, groups),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, true, 1.0),
            time: self.linear(&format!("{name}.time"), temb, c),
            norm2: self.norm(&format!("{name}.norm2"), c, groups),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, true, 0.5),
        }
    }
}

/// The base denoiser: configuration plus frozen-able named weights.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar = f32> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Denoiser<T> {
    /// Randomly initialized model; the output convolution starts at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, streams::INIT);
        let mut b = Builder { store: ParamStore::default(), rng: &mut r };
        let ch = &config.channels;
        let temb = config.temb_dim();
        let time1 = b.linear("time.fc1", config.time_dim, temb);
        let time2 = b.linear("time.fc2", temb, temb);
        let conv_in = b.conv("in", config.latent_channels, ch[0], 3, true, 1.0);
        let mut down = Vec::new();
        for i in 0..config.levels() {
            let proj = (i > 0).then(|| b.conv(&format!("down{i}.proj"), ch[i - 1], ch[i], 1, true, 1.0));
            let res = b.res(&format!("down{i}.res"), ch[i], temb, config.groups(ch[i]));
            let sft = Sft {
                scale: b.conv(&format!("down{i}.sft.scale"), ch[i], ch[i], 1, false, 0.1),
                shift: b.conv(&format!("down{i}.sft.shift"), ch[i], ch[i], 1, false, 0.1),
            };
            down.push((proj, res, sft));
        }
        let last = ch[config.levels() - 1];
        let mid = b.res("mid.res", last, temb, config.groups(last));
        let mut up = Vec::new();
        for i in 0..config.levels() {
            let res = b.res(&format!("up{i}.res"), ch[i], temb, config.groups(ch[i]));
            let proj = (i > 0).then(|| b.conv(&format!("up{i}.proj"), ch[i], ch[i - 1], 1, true, 1.0));
            up.push((res, proj));
        }
        let out_norm = b.norm("out.norm", ch[0], config.groups(ch[0]));
        let conv_out = b.conv("out.conv", ch[0], config.latent_channels, 3, true, 0.0);
        let lq_in = b.conv("lq.in", config.latent_channels, ch[0], 3, true, 1.0);
        let lq_time = b.linear("lq.time", temb, ch[0]);
        let lq_mix = b.conv("lq.mix", ch[0], ch[0], 3, true, 1.0);
        let lq_down = (1..config.levels())
            .map(|i| b.conv(&format!("lq.down{i}"), ch[i - 1], ch[i], 3, true, 1.0))
            .collect();
        let tokens = b.tensor("tokens.table".into(), config.vocab_size(), config.token_dim, 1.0);
        let layout = Layout {
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            conv_out,
            lq_in,
            lq_time,
            lq_mix,
            lq_down,
            tokens,
        };
        Ok(Self { config, params: b.store, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Embedding row of a vocabulary token.
    pub fn token_embedding(&self, id: usize) -> Tensor<T> {
        let table = self.params.get(self.layout.tokens);
        Tensor::new(1, 1, self.config.token_dim, table.row(id).to_vec()).expect("row")
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let (h, w, c) = z.shape();
        let m = 1 << (self.config.levels() - 1);
        if c != self.config.latent_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(invalid!(
                "latent {h}x{w}x{c} incompatible with {} channels and {} levels",
                self.config.latent_channels,
                self.config.levels()
            ));
        }
        Ok(())
    }

    /// Predicted noise for `z_t`. `lq = None` disables all conditioning;
    /// `pstate = None` or `ref_features = None` runs the pure base model.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        prompt: &PromptTokens,
        lq: Option<&ImageBuffer>,
        ref_features: Option<&[Tensor<T>]>,
        pstate: Option<&PersonalizationState<T>>,
        lambda_att: f64,
    ) -> Result<Tensor<T>> {
        let mut s = Session::new(self, pstate, false, false);
        let out = s.forward(z_t, t, prompt, lq, ref_features, lambda_att)?;
        Ok(s.graph.value(out).clone())
    }

    /// Per-level LQ features (finest first).
    pub fn encode_lq_condition(&self, lq: &ImageBuffer, t: usize) -> Result<Vec<Tensor<T>>> {
        let mut s = Session::new(self, None, false, false);
        let feats = s.lq_features(lq, t)?;
        Ok(feats.into_iter().map(|v| s.graph.value(v).clone()).collect())
    }

    /// Features at every personalization site of the base path (no LQ
    /// conditioning, no personalization) for an already-noised latent.
    pub fn site_features(&self, z_t: &Tensor<T>, t: usize) -> Result<Vec<Tensor<T>>> {
        self.check_latent(z_t)?;
        let mut s = Session::new(self, None, false, false);
        let z = s.graph.constant(z_t.clone());
        let (_, feats) = s.unet(z, t, None, None, true)?;
        Ok(feats.into_iter().map(|v| s.graph.value(v).clone()).collect())
    }

    /// Encodes `reference`, noises it to step `t` with `eps` and returns the
    /// base-path features at every personalization site.
    pub fn extract_reference_features(
        &self,
        reference: &ImageBuffer,
        t: usize,
        eps: &Tensor<f64>,
        sched: &crate::diffusion::NoiseSchedule,
    ) -> Result<Vec<Tensor<T>>> {
        let z0 = latent::encode(reference)?;
        let zt = sched.q_sample(&z0, t, eps)?;
        self.site_features(&zt.cast(), t)
    }
}

/// Gains, adapter weights and the learnable token for one identity, plus
/// the reference images the adapters attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizationState<T: Scalar = f32> {
    params: ParamStore<T>,
    layout: PersLayout,
    references: Vec<ImageBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attention {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct PersLayout {
    sites: Vec<(Site, Attention, Attention, usize)>,
    star: usize,
}

impl<T: Scalar> PersonalizationState<T> {
    /// Fresh state: random adapters, zero gains, `*` initialized from the
    /// embedding of [`prompt::STAR_INIT_WORD`].
    pub fn new(model: &Denoiser<T>, references: Vec<ImageBuffer>, seed: u64) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::EmptyReferences);
        }
        let cfg = model.config();
        let mut r = rng::stream(seed, streams::INIT);
        let mut b = Builder { store: ParamStore::default(), rng: &mut r };
        let (d, e) = (cfg.head_dim, cfg.token_dim);
        let mut sites = Vec::new();
        for (site, c, _) in cfg.sites() {
            let n = site.name();
            let std = |fan: usize| 1.0 / libm::sqrt(fan as f64);
            let text = Attention {
                wq: b.tensor(format!("pers.{n}.text.wq"), c, d, std(c)),
                wk: b.tensor(format!("pers.{n}.text.wk"), e, d, std(e)),
                wv: b.tensor(format!("pers.{n}.text.wv"), e, d, std(e)),
                wo: b.tensor(format!("pers.{n}.text.wo"), d, c, std(d)),
            };
            let image = Attention {
                wq: b.tensor(format!("pers.{n}.image.wq"), c, d, std(c)),
                wk: b.tensor(format!("pers.{n}.image.wk"), c, d, std(c)),
                wv: b.tensor(format!("pers.{n}.image.wv"), c, d, std(c)),
                wo: b.tensor(format!("pers.{n}.image.wo"), d, c, std(d)),
            };
            let gamma = b.constant(format!("pers.{n}.gamma"), c, 0.0);
            sites.push((site, text, image, gamma));
        }
        let star_row = model.token_embedding(prompt::token_id(prompt::STAR_INIT_WORD));
        let star = b.store.push("star", star_row);
        Ok(Self { params: b.store, layout: PersLayout { sites, star }, references })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn references(&self) -> &[ImageBuffer] {
        &self.references
    }

    pub fn sites(&self) -> Vec<Site> {
        self.layout.sites.iter().map(|s| s.0).collect()
    }

    /// Gain vector of every site, in site order.
    pub fn gains(&self) -> Vec<(Site, &Tensor<T>)> {
        self.layout.sites.iter().map(|s| (s.0, self.params.get(s.3))).collect()
    }

    pub fn star(&self) -> &Tensor<T> {
        self.params.get(self.layout.star)
    }

    pub fn cast<U: Scalar>(&self) -> PersonalizationState<U> {
        PersonalizationState { params: self.params.cast(), layout: self.layout.clone(), references: self.references.clone() }
    }
}

/// A differentiation session over one model (and optionally one
/// personalization state). Several forwards may share a session; their
/// parameter gradients accumulate.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<'a, T>,
    model: &'a Denoiser<T>,
    pstate: Option<&'a PersonalizationState<T>>,
    base_vars: Vec<Option<Var>>,
    pers_vars: Vec<Option<Var>>,
    train_base: bool,
    train_pers: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(
        model: &'a Denoiser<T>,
        pstate: Option<&'a PersonalizationState<T>>,
        train_base: bool,
        train_pers: bool,
    ) -> Self {
        Self {
            graph: Graph::new(),
            model,
            pstate,
            base_vars: vec![None; model.params.len()],
            pers_vars: vec![None; pstate.map_or(0, |p| p.params.len())],
            train_base,
            train_pers,
        }
    }

    fn bp(&mut self, i: usize) -> Var {
        if let Some(v) = self.base_vars[i] {
            return v;
        }
        let v = self.graph.param(self.model.params.get(i), self.train_base);
        self.base_vars[i] = Some(v);
        v
    }

    fn pp(&mut self, i: usize) -> Var {
        if let Some(v) = self.pers_vars[i] {
            return v;
        }
        let ps = self.pstate.expect("personalization parameters need a state");
        let v = self.graph.param(ps.params.get(i), self.train_pers);
        self.pers_vars[i] = Some(v);
        v
    }

    pub fn backward(&mut self, loss: Var) {
        self.graph.backward(loss);
    }

    /// Gradient of every base parameter, by index (`None` if untouched).
    pub fn base_grads(&self) -> Vec<Option<&Tensor<T>>> {
        self.base_vars.iter().map(|v| v.and_then(|v| self.graph.grad(v))).collect()
    }

    /// Gradient of every personalization parameter, by index.
    pub fn pers_grads(&self) -> Vec<Option<&Tensor<T>>> {
        self.pers_vars.iter().map(|v| v.and_then(|v| self.graph.grad(v))).collect()
    }

    fn conv(&mut self, x: Var, c: Conv) -> Var {
        let w = self.bp(c.w);
        let b = c.b.map(|b| self.bp(b));
        self.graph.conv(x, w, b, c.k)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.bp(l.w);
        let b = self.bp(l.b);
        let y = self.graph.matmul(x, w, false);
        self.graph.add_row(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.bp(n.g);
        let b = self.bp(n.b);
        self.graph.group_norm(x, g, b, n.groups)
    }

    fn res(&mut self, x: Var, r: ResBlock, temb_act: Var) -> Var {
        let h = self.norm(x, r.norm1);
        let h = self.graph.silu(h);
        let h = self.conv(h, r.conv1);
        let tp = self.linear(temb_act, r.time);
        let h = self.graph.add_row(h, tp);
        let h = self.norm(h, r.norm2);
        let h = self.graph.silu(h);
        let h = self.conv(h, r.conv2);
        self.graph.add(x, h)
    }

    /// `silu(MLP(sinusoid(t)))`, shape `1 x 1 x temb`.
    fn time_embedding(&mut self, t: usize) -> Var {
        let dim = self.model.config.time_dim;
        let half = dim / 2;
        let mut e = Vec::with_capacity(dim);
        for k in 0..half {
            let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
            e.push(T::of(libm::sin(t as f64 * freq)));
        }
        for k in 0..half {
            let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
            e.push(T::of(libm::cos(t as f64 * freq)));
        }
        let s = self.graph.constant(Tensor::new(1, 1, dim, e).expect("sinusoid"));
        let l = self.model.layout.clone();
        let h = self.linear(s, l.time1);
        let h = self.graph.silu(h);
        let h = self.linear(h, l.time2);
        self.graph.silu(h)
    }

    /// Per-level LQ features, finest first.
    pub fn lq_features(&mut self, lq: &ImageBuffer, t: usize) -> Result<Vec<Var>> {
        let z = latent::encode(lq)?.cast::<T>();
        self.model.check_latent(&z)?;
        let temb = self.time_embedding(t);
        self.lq_features_with(z, temb)
    }

    fn lq_features_with(&mut self, z: Tensor<T>, temb: Var) -> Result<Vec<Var>> {
        let l = self.model.layout.clone();
        let x = self.graph.constant(z);
        let h = self.conv(x, l.lq_in);
        let tp = self.linear(temb, l.lq_time);
        let h = self.graph.add_row(h, tp);
        let h = self.graph.silu(h);
        let h = self.conv(h, l.lq_mix);
        let mut f = self.graph.silu(h);
        let mut feats = vec![f];
        for c in l.lq_down {
            let p = self.graph.avg_pool2(f);
            let h = self.conv(p, c);
            f = self.graph.silu(h);
            feats.push(f);
        }
        Ok(feats)
    }

    /// Runs the network. Returns the output and the features at every
    /// personalization site (taken before the site's block is applied).
    fn unet(
        &mut self,
        z: Var,
        t: usize,
        lq: Option<&ImageBuffer>,
        pers: Option<(&PromptTokens, &[Var], f64)>,
        features_only: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let l = self.model.layout.clone();
        let n_sites = self.model.config.sites().len();
        let temb = self.time_embedding(t);
        let lq_feats = match lq {
            Some(img) => {
                let zl = latent::encode(img)?.cast::<T>();
                if zl.shape() != self.graph.value(z).shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "LQ latent {:?} vs z_t {:?}",
                        zl.shape(),
                        self.graph.value(z).shape()
                    )));
                }
                Some(self.lq_features_with(zl, temb)?)
            }
            None => None,
        };
        let mut site_feats = Vec::new();
        let mut site_index = 0;
        let prompt_emb = pers.map(|(p, _, _)| self.prompt_embeddings(p));
        let mut apply_site = |s: &mut Self, h: Var, feats: &mut Vec<Var>| -> Var {
            feats.push(h);
            let i = site_index;
            site_index += 1;
            match (pers, prompt_emb) {
                (Some((_, refs, lambda)), Some(e)) => {
                    let p = s.personalization_block(i, h, refs[i], e, lambda);
                    let gamma = s.pp(s.pstate.expect("state").layout.sites[i].3);
                    let gp = s.graph.mul_row(p, gamma);
                    s.graph.add(h, gp)
                }
                _ => h,
            }
        };

        let mut h = self.conv(z, l.conv_in);
        let mut skips = Vec::with_capacity(l.down.len());
        for (i, (proj, res, sft)) in l.down.iter().enumerate() {
            if let Some(p) = proj {
                let pooled = self.graph.avg_pool2(h);
                h = self.conv(pooled, *p);
            }
            h = self.res(h, *res, temb);
            if let Some(f) = &lq_feats {
                let scale = self.conv(f[i], sft.scale);
                let shift = self.conv(f[i], sft.shift);
                let hs = self.graph.mul(h, scale);
                let h1 = self.graph.add(h, hs);
                h = self.graph.add(h1, shift);
            }
            if i > 0 {
                h = apply_site(self, h, &mut site_feats);
            }
            skips.push(h);
        }
        h = self.res(h, l.mid, temb);
        h = apply_site(self, h, &mut site_feats);
        if features_only && site_feats.len() == n_sites {
            return Ok((h, site_feats));
        }
        let levels = l.up.len();
        for i in (0..levels).rev() {
            let (res, proj) = l.up[i];
            h = self.graph.add(h, skips[i]);
            h = self.res(h, res, temb);
            if i > 0 && i < levels - 1 {
                h = apply_site(self, h, &mut site_feats);
                if features_only && site_feats.len() == n_sites {
                    return Ok((h, site_feats));
                }
            }
            if let Some(p) = proj {
                let u = self.graph.upsample2(h);
                h = self.conv(u, p);
            }
        }
        let h = self.norm(h, l.out_norm);
        let h = self.graph.silu(h);
        let out = self.conv(h, l.conv_out);
        let (c_skip, c_out) = output_skip(t);
        let skip = self.graph.scale(z, c_skip);
        let out = self.graph.scale(out, c_out);
        Ok((self.graph.add(skip, out), site_feats))
    }

    /// Prompt embeddings `L x 1 x token_dim`, with the `*` row taken from
    /// the personalization state.
    fn prompt_embeddings(&mut self, prompt: &PromptTokens) -> Var {
        let table = self.model.params.get(self.model.layout.tokens);
        let e = self.model.config.token_dim;
        let mut rows = Vec::with_capacity(prompt.len() * e);
        for &id in prompt.ids() {
            rows.extend_from_slice(table.row(id));
        }
        let base = self.graph.constant(Tensor::matrix(prompt.len(), e, rows).expect("prompt"));
        match (prompt.star_position(), self.pstate) {
            (Some(pos), Some(ps)) => {
                let star = self.pp(ps.layout.star);
                self.graph.scatter_row(base, star, pos)
            }
            _ => base,
        }
    }

    fn attend(&mut self, q_src: Var, kv_src: Var, a: Attention) -> Var {
        let d = self.model.config.head_dim;
        let wq = self.pp(a.wq);
        let wk = self.pp(a.wk);
        let wv = self.pp(a.wv);
        let wo = self.pp(a.wo);
        let q = self.graph.matmul(q_src, wq, false);
        let k = self.graph.matmul(kv_src, wk, false);
        let v = self.graph.matmul(kv_src, wv, false);
        let logits = self.graph.matmul(q, k, true);
        let logits = self.graph.scale(logits, 1.0 / libm::sqrt(d as f64));
        let attn = self.graph.softmax(logits);
        let av = self.graph.matmul(attn, v, false);
        self.graph.matmul(av, wo, false)
    }

    /// `P(F, F_ref)` at site `i`: text attention plus `lambda_att` times
    /// image attention. The image path is skipped when `lambda_att == 0`.
    fn personalization_block(&mut self, i: usize, f: Var, f_ref: Var, prompt_emb: Var, lambda_att: f64) -> Var {
        let (_, text, image, _) = self.pstate.expect("state").layout.sites[i];
        let fq = self.graph.rms_norm(f);
        let p = self.attend(fq, prompt_emb, text);
        if lambda_att == 0.0 {
            return p;
        }
        let rn = self.graph.rms_norm(f_ref);
        let img = self.attend(fq, rn, image);
        let img = self.graph.scale(img, lambda_att);
        self.graph.add(p, img)
    }

    /// Full forward pass; see [`Denoiser::forward`].
    pub fn forward(
        &mut self,
        z_t: &Tensor<T>,
        t: usize,
        prompt: &PromptTokens,
        lq: Option<&ImageBuffer>,
        ref_features: Option<&[Tensor<T>]>,
        lambda_att: f64,
    ) -> Result<Var> {
        self.model.check_latent(z_t)?;
        let z = self.graph.constant(z_t.clone());
        let refs = match (self.pstate, ref_features) {
            (Some(ps), Some(rf)) => {
                let sites = self.model.config.sites();
                if rf.len() != ps.layout.sites.len() || rf.len() != sites.len() {
                    return Err(invalid!("expected {} reference feature maps, got {}", sites.len(), rf.len()));
                }
                let (h, w, _) = z_t.shape();
                let mut vars = Vec::with_capacity(rf.len());
                for (f, (site, c, stride)) in rf.iter().zip(&sites) {
                    if f.shape() != (h / stride, w / stride, *c) {
                        return Err(Error::ShapeMismatch(format!(
                            "reference features at {} are {:?}, expected {:?}",
                            site.name(),
                            f.shape(),
                            (h / stride, w / stride, *c)
                        )));
                    }
                    vars.push(self.graph.constant(f.clone()));
                }
                Some(vars)
            }
            _ => None,
        };
        let pers = refs.as_deref().map(|r| (prompt, r, lambda_att));
        let (out, _) = self.unet(z, t, lq, pers, false)?;
        Ok(out)
    }

    /// Text-attention maps of every site with queries from the reference
    /// features: one `h x w x L` tensor per site.
    pub fn attention_maps(&mut self, ref_features: &[Tensor<T>], prompt: &PromptTokens) -> Result<Vec<Var>> {
        let ps = self.pstate.ok_or_else(|| invalid!("attention maps need a personalization state"))?;
        if prompt.star_position().is_none() {
            return Err(Error::InvalidPrompt("prompt has no `*` token".into()));
        }
        if ref_features.len() != ps.layout.sites.len() {
            return Err(invalid!("expected {} reference feature maps, got {}", ps.layout.sites.len(), ref_features.len()));
        }
        let e = self.prompt_embeddings(prompt);
        let d = self.model.config.head_dim;
        let mut maps = Vec::with_capacity(ref_features.len());
        for (i, f) in ref_features.iter().enumerate() {
            let text = ps.layout.sites[i].1;
            let fr = self.graph.constant(f.clone());
            let fq = self.graph.rms_norm(fr);
            let wq = self.pp(text.wq);
            let wk = self.pp(text.wk);
            let q = self.graph.matmul(fq, wq, false);
            let k = self.graph.matmul(e, wk, false);
            let logits = self.graph.matmul(q, k, true);
            let logits = self.graph.scale(logits, 1.0 / libm::sqrt(d as f64));
            maps.push(self.graph.softmax(logits));
        }
        Ok(maps)
    }

    /// Mean over sites of `|| A_* / max A_* - A_eot / max A_eot ||^2`.
    pub fn pers_loss(&mut self, ref_features: &[Tensor<T>], prompt: &PromptTokens) -> Result<Var> {
        let maps = self.attention_maps(ref_features, prompt)?;
        let star = prompt.star_position().expect("checked");
        let eot = prompt.eot_position();
        let mut total: Option<Var> = None;
        for a in &maps {
            let s = self.graph.column(*a, star);
            let e = self.graph.column(*a, eot);
            let l = crate::diffusion::pers_loss_graph(&mut self.graph, s, e)?;
            total = Some(match total {
                Some(t) => self.graph.add(t, l),
                None => l,
            });
        }
        let total = total.ok_or_else(|| invalid!("no personalization sites"))?;
        Ok(self.graph.scale(total, 1.0 / maps.len() as f64))
    }
}

/// Per-token attention over the reference features at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `h x w x L`; rows sum to one.
    pub map: Tensor<f64>,
    pub star: usize,
    pub eot: usize,
}

impl AttentionMap {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.map.data().chunks_exact(self.map.channels()).map(|r| r[j]).collect()
    }

    pub fn star_map(&self) -> Vec<f64> {
        self.column(self.star)
    }

    pub fn eot_map(&self) -> Vec<f64> {
        self.column(self.eot)
    }

    /// Foreground mask: `A_*` at or above its mean.
    pub fn foreground_mask(&self) -> Vec<bool> {
        threshold_at_mean(&self.star_map())
    }
}

/// `v >= mean(v)` elementwise.
pub fn threshold_at_mean(v: &[f64]) -> Vec<bool> {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    v.iter().map(|&x| x >= mean).collect()
}

/// Attention maps of every site for the given reference features.
pub fn attention_map<T: Scalar>(
    model: &Denoiser<T>,
    ref_features: &[Tensor<T>],
    prompt: &PromptTokens,
    pstate: &PersonalizationState<T>,
) -> Result<Vec<AttentionMap>> {
    let mut s = Session::new(model, Some(pstate), false, false);
    let maps = s.attention_maps(ref_features, prompt)?;
    let star = prompt.star_position().expect("checked by attention_maps");
    Ok(maps
        .into_iter()
        .map(|v| AttentionMap { map: s.graph.value(v).cast(), star, eot: prompt.eot_position() })
        .collect())
}

/// `P(F, F_ref)` of site `site_index` evaluated in isolation.
pub fn personalization_block<T: Scalar>(
    model: &Denoiser<T>,
    site_index: usize,
    f: &Tensor<T>,
    f_ref: &Tensor<T>,
    prompt: &PromptTokens,
    pstate: &PersonalizationState<T>,
    lambda_att: f64,
) -> Result<Tensor<T>> {
    let sites = model.config().sites();
    let (site, c, _) = sites.get(site_index).ok_or_else(|| invalid!("no site {site_index}"))?;
    if f.shape() != f_ref.shape() || f.channels() != *c {
        return Err(invalid!(
            "features {:?} and reference {:?} do not match site {} ({c} channels)",
            f.shape(),
            f_ref.shape(),
            site.name()
        ));
    }
    let mut s = Session::new(model, Some(pstate), false, false);
    let fv = s.graph.constant(f.clone());
    let rv = s.graph.constant(f_ref.clone());
    let e = s.prompt_embeddings(prompt);
    let p = s.personalization_block(site_index, fv, rv, e, lambda_att);
    Ok(s.graph.value(p).clone())
}

/// `F + gamma * P` with the gain of `site_index`.
pub fn apply_gain<T: Scalar>(f: &Tensor<T>, p: &Tensor<T>, pstate: &PersonalizationState<T>, site_index: usize) -> Tensor<T> {
    let gamma = pstate.params.get(pstate.layout.sites[site_index].3);
    let c = f.channels();
    let mut out = f.clone();
    for (row, prow) in out.data_mut().chunks_exact_mut(c).zip(p.data().chunks_exact(c)) {
        for ((o, &pv), &g) in row.iter_mut().zip(prow).zip(gamma.data()) {
            *o = *o + g * pv;
        }
    }
    out
}
