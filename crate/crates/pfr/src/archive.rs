//! Binary weight archives.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PFRW" | version | metadata length | metadata (UTF-8 `key = value` lines)
//! tensor count | per tensor: name length, name, height, width, channels, f32 data
//! ```
//!
//! Base archives carry the model parameters; personalization archives carry
//! the adapters, gains, `*` embedding and the reference images as
//! `reference.{i}` tensors.

use std::collections::BTreeMap;
use std::path::Path;

use pfr_core::denoiser::{Denoiser, DenoiserConfig, PersonalizationState};
use pfr_core::tensor::{Scalar, Tensor};
use pfr_core::ImageBuffer;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFRW";
pub const VERSION: u32 = 1;
pub const KIND_BASE: &str = "base";
pub const KIND_PERSONALIZATION: &str = "personalization";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("archive field fits in u32").to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::archive(self.path, "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let path = self.path;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::archive(path, "non-UTF-8 text"))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            let (h, w, c) = t.shape();
            for d in [h, w, c] {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.bytes(4)? != MAGIC {
            return Err(Error::archive(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::archive(path, format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::archive(path, "bad metadata line"))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let (h, w, c) = (r.u32()?, r.u32()?, r.u32()?);
            let n = h
                .checked_mul(w)
                .and_then(|x| x.checked_mul(c))
                .ok_or_else(|| Error::archive(path, "tensor too large"))?;
            let data = r
                .bytes(n.checked_mul(4).ok_or_else(|| Error::archive(path, "tensor too large"))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::new(h, w, c, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::archive(path, "trailing bytes"));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    fn meta(&self, key: &str, path: &Path) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| Error::archive(path, format!("missing `{key}`")))
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        let found = self.meta("kind", path)?;
        if found != kind {
            return Err(Error::archive(path, format!("expected a {kind} archive, found {found}")));
        }
        Ok(())
    }

    fn model_config(&self) -> Result<DenoiserConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in self.metadata.iter().filter(|(k, _)| k.starts_with("model.")) {
            cfg.set(k, v)?;
        }
        Ok(cfg.model)
    }
}

fn model_metadata(kind: &str, cfg: &DenoiserConfig) -> BTreeMap<String, String> {
    let mut run = RunConfig::default();
    run.model = cfg.clone();
    let mut m: BTreeMap<String, String> = run
        .to_text()
        .lines()
        .filter(|l| l.starts_with("model."))
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    m.insert("kind".into(), kind.into());
    m
}

fn tensors_f32<T: Scalar>(params: &pfr_core::denoiser::ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
    params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect()
}

pub fn model_archive<T: Scalar>(model: &Denoiser<T>) -> Archive {
    Archive { metadata: model_metadata(KIND_BASE, model.config()), tensors: tensors_f32(model.params()) }
}

/// SHA-256 of the serialized base weights.
pub fn model_digest<T: Scalar>(model: &Denoiser<T>) -> String {
    sha256_hex(&model_archive(model).to_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn save_model<T: Scalar>(path: &Path, model: &Denoiser<T>) -> Result<()> {
    model_archive(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Denoiser<f32>> {
    let a = Archive::load(path)?;
    a.expect_kind(KIND_BASE, path)?;
    let mut model = Denoiser::<f32>::new(a.model_config()?, 0)?;
    model.params_mut().load(a.tensors.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
    Ok(model)
}

/// Personalization archive. `base_digest` ties the state to the base weights
/// it was trained against.
pub fn state_archive<T: Scalar>(model: &Denoiser<T>, state: &PersonalizationState<T>, base_digest: &str) -> Archive {
    let mut metadata = model_metadata(KIND_PERSONALIZATION, model.config());
    metadata.insert("base.sha256".into(), base_digest.into());
    metadata.insert("references".into(), state.references().len().to_string());
    let mut tensors = tensors_f32(state.params());
    for (i, r) in state.references().iter().enumerate() {
        let t = Tensor::new(r.height(), r.width(), 3, r.data().to_vec()).expect("image buffer is a valid tensor");
        tensors.push((format!("reference.{i}"), t));
    }
    Archive { metadata, tensors }
}

pub fn save_state<T: Scalar>(
    path: &Path,
    model: &Denoiser<T>,
    state: &PersonalizationState<T>,
    base_digest: &str,
) -> Result<()> {
    state_archive(model, state, base_digest).save(path)
}

/// Loads a state for `model`, rejecting archives made for different weights.
pub fn load_state(path: &Path, model: &Denoiser<f32>) -> Result<PersonalizationState<f32>> {
    let a = Archive::load(path)?;
    a.expect_kind(KIND_PERSONALIZATION, path)?;
    if &a.model_config()? != model.config() {
        return Err(Error::archive(path, "model configuration differs from the base"));
    }
    let digest = model_digest(model);
    if a.meta("base.sha256", path)? != digest {
        return Err(Error::archive(path, "state was trained against different base weights"));
    }
    let (refs, params): (Vec<_>, Vec<_>) = a.tensors.into_iter().partition(|(n, _)| n.starts_with("reference."));
    let mut images = Vec::with_capacity(refs.len());
    for i in 0..refs.len() {
        let name = format!("reference.{i}");
        let (_, t) = refs.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::archive(path, format!("missing {name}")))?;
        if t.channels() != 3 {
            return Err(Error::archive(path, format!("{name} is not an RGB image")));
        }
        images.push(ImageBuffer::new(t.height(), t.width(), t.data().to_vec())?);
    }
    let mut state = PersonalizationState::new(model, images, 0)?;
    state.params_mut().load(params.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
    Ok(state)
}
