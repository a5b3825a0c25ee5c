//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected. Command-line flags are applied on top
//! of a loaded file. [`RunConfig::to_text`] writes every key, so a manifest
//! snapshot loads back into the same configuration.

use std::fmt::Write as _;
use std::path::Path;

use pfr_core::degradation::Level;
use pfr_core::denoiser::{DenoiserConfig, PromptTokens};
use pfr_core::diffusion::{SamplerConfig, TrainLossConfig};
use pfr_core::train::{BaseTrainConfig, PersonalizeConfig};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub model: DenoiserConfig,
    pub data_identities: usize,
    pub data_images: usize,
    pub data_size: usize,
    pub degradation_level: Level,
    pub degradation_p_hq: f64,
    pub train: BaseTrainConfig,
    pub personalize: PersonalizeConfig,
    pub sampler_steps: usize,
    pub sampler_cfg: f64,
    pub sampler_lambda_att: f64,
    pub sampler_null_lq_negative: bool,
    pub sampler_positive: String,
    pub sampler_negative: String,
    /// Tile edge in image pixels.
    pub tile: usize,
    /// Tile overlap in image pixels.
    pub overlap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            model: DenoiserConfig::default(),
            data_identities: 200,
            data_images: 5,
            data_size: 64,
            degradation_level: Level::Heavy,
            degradation_p_hq: 0.0,
            train: BaseTrainConfig::default(),
            personalize: PersonalizeConfig::default(),
            sampler_steps: pfr_core::diffusion::DEFAULT_STEPS,
            sampler_cfg: pfr_core::diffusion::DEFAULT_LAMBDA_CFG,
            sampler_lambda_att: pfr_core::denoiser::DEFAULT_LAMBDA_ATT,
            sampler_null_lq_negative: false,
            sampler_positive: pfr_core::denoiser::prompt::POSITIVE_PROMPT.into(),
            sampler_negative: pfr_core::denoiser::prompt::NEGATIVE_PROMPT.into(),
            tile: 64,
            overlap: 32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

pub fn parse_level(value: &str) -> Result<Level> {
    match value.trim() {
        "light" => Ok(Level::Light),
        "heavy" => Ok(Level::Heavy),
        other => Err(Error::Config(format!("unknown degradation level `{other}` (light or heavy)"))),
    }
}

fn level_name(l: Level) -> &'static str {
    match l {
        Level::Light => "light",
        Level::Heavy => "heavy",
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Derived keys (token ids) are accepted and ignored.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "model.channels" => {
                self.model.channels = v.split(',').map(|c| parse(key, c)).collect::<Result<_>>()?;
            }
            "model.latent_channels" => self.model.latent_channels = parse(key, v)?,
            "model.time_dim" => self.model.time_dim = parse(key, v)?,
            "model.token_dim" => self.model.token_dim = parse(key, v)?,
            "model.head_dim" => self.model.head_dim = parse(key, v)?,
            "model.max_groups" => self.model.max_groups = parse(key, v)?,
            "data.identities" => self.data_identities = parse(key, v)?,
            "data.images" => self.data_images = parse(key, v)?,
            "data.size" => self.data_size = parse(key, v)?,
            "degradation.level" => self.degradation_level = parse_level(v)?,
            "degradation.p_hq" => self.degradation_p_hq = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.crop_size" => self.train.crop_size = parse(key, v)?,
            "train.crop_prob" => self.train.crop_prob = parse(key, v)?,
            "train.p_hq" => self.train.p_hq = parse(key, v)?,
            "train.level" => self.train.level = parse_level(v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.ema_decay" => self.train.ema_decay = parse(key, v)?,
            "personalize.iterations" => self.personalize.iterations = parse(key, v)?,
            "personalize.n_ref" => self.personalize.n_ref = parse(key, v)?,
            "personalize.batch_size" => self.personalize.batch_size = parse(key, v)?,
            "personalize.lr_adapter" => self.personalize.lr_adapter = parse(key, v)?,
            "personalize.lr_token" => self.personalize.lr_token = parse(key, v)?,
            "personalize.lambda_gen" => self.personalize.loss.lambda_gen = parse(key, v)?,
            "personalize.lambda_pers" => self.personalize.loss.lambda_pers = parse(key, v)?,
            "personalize.crop_size" => self.personalize.crop_size = parse(key, v)?,
            "personalize.crop_prob" => self.personalize.crop_prob = parse(key, v)?,
            "personalize.p_hq" => self.personalize.p_hq = parse(key, v)?,
            "personalize.level" => self.personalize.level = parse_level(v)?,
            "personalize.lambda_att" => self.personalize.lambda_att = parse(key, v)?,
            "sampler.steps" => self.sampler_steps = parse(key, v)?,
            "sampler.cfg" => self.sampler_cfg = parse(key, v)?,
            "sampler.lambda_att" => self.sampler_lambda_att = parse(key, v)?,
            "sampler.null_lq_negative" => self.sampler_null_lq_negative = parse_bool(key, v)?,
            "sampler.positive" => self.sampler_positive = v.to_string(),
            "sampler.negative" => self.sampler_negative = v.to_string(),
            "sampler.positive_ids" | "sampler.negative_ids" => {}
            "tiling.tile" => self.tile = parse(key, v)?,
            "tiling.overlap" => self.overlap = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in load order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.personalize;
        let t = &self.train;
        let ids = |text: &str| PromptTokens::parse(text).map(|p| join(p.ids())).unwrap_or_else(|e| format!("<{e}>"));
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("jobs", self.jobs.to_string()),
            ("model.latent_channels", self.model.latent_channels.to_string()),
            ("model.channels", join(&self.model.channels)),
            ("model.time_dim", self.model.time_dim.to_string()),
            ("model.token_dim", self.model.token_dim.to_string()),
            ("model.head_dim", self.model.head_dim.to_string()),
            ("model.max_groups", self.model.max_groups.to_string()),
            ("data.identities", self.data_identities.to_string()),
            ("data.images", self.data_images.to_string()),
            ("data.size", self.data_size.to_string()),
            ("degradation.level", level_name(self.degradation_level).into()),
            ("degradation.p_hq", self.degradation_p_hq.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.crop_size", t.crop_size.to_string()),
            ("train.crop_prob", t.crop_prob.to_string()),
            ("train.p_hq", t.p_hq.to_string()),
            ("train.level", level_name(t.level).into()),
            ("train.lr", t.lr.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("personalize.iterations", p.iterations.to_string()),
            ("personalize.n_ref", p.n_ref.to_string()),
            ("personalize.batch_size", p.batch_size.to_string()),
            ("personalize.lr_adapter", p.lr_adapter.to_string()),
            ("personalize.lr_token", p.lr_token.to_string()),
            ("personalize.lambda_gen", p.loss.lambda_gen.to_string()),
            ("personalize.lambda_pers", p.loss.lambda_pers.to_string()),
            ("personalize.crop_size", p.crop_size.to_string()),
            ("personalize.crop_prob", p.crop_prob.to_string()),
            ("personalize.p_hq", p.p_hq.to_string()),
            ("personalize.level", level_name(p.level).into()),
            ("personalize.lambda_att", p.lambda_att.to_string()),
            ("sampler.steps", self.sampler_steps.to_string()),
            ("sampler.cfg", self.sampler_cfg.to_string()),
            ("sampler.lambda_att", self.sampler_lambda_att.to_string()),
            ("sampler.null_lq_negative", self.sampler_null_lq_negative.to_string()),
            ("sampler.positive", self.sampler_positive.clone()),
            ("sampler.positive_ids", ids(&self.sampler_positive)),
            ("sampler.negative", self.sampler_negative.clone()),
            ("sampler.negative_ids", ids(&self.sampler_negative)),
            ("tiling.tile", self.tile.to_string()),
            ("tiling.overlap", self.overlap.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            num_steps: self.sampler_steps,
            lambda_cfg: self.sampler_cfg,
            positive: PromptTokens::parse(&self.sampler_positive)?,
            negative: PromptTokens::parse(&self.sampler_negative)?,
            seed: self.seed,
            lambda_att: self.sampler_lambda_att,
            null_lq_negative: self.sampler_null_lq_negative,
        })
    }

    pub fn base_train(&self) -> BaseTrainConfig {
        BaseTrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn personalize(&self) -> PersonalizeConfig {
        PersonalizeConfig { seed: self.seed, ..self.personalize.clone() }
    }

    pub fn loss(&self) -> TrainLossConfig {
        self.personalize.loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.model.channels = vec![8, 16];
        cfg.sampler_null_lq_negative = true;
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_text("bogus = 1"), Err(Error::Config(_))));
        assert!(cfg.apply_text("seed 1").is_err());
        assert!(cfg.apply_text("seed = x").is_err());
        assert!(cfg.apply_text("# comment\n\nseed = 4").is_ok());
        assert_eq!(cfg.seed, 4);
    }
}
