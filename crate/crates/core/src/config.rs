//! Run configuration as a flat `key = value` text file with dotted keys.
//!
//! Every key has a type and a default. Values are normalised on parse so
//! that the canonical text, and therefore the hash, does not depend on how
//! a number was spelled. The hash covers only the keys that define the
//! frozen model (schedule, codec, encoder, backbone, corpus, pretraining);
//! inversion and generation settings can change without invalidating
//! checkpoints or style records.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;

use crate::conditioning::ImageEncoderConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, SigmaMode};
use crate::digest;
use crate::error::{Error, Result};
use crate::eval::{BenchConfig, ThresholdRule};
use crate::inversion::{InversionConfig, InversionTrainConfig};
use crate::pretrain::{LossWeighting, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Real,
    Text,
}

const MODEL_PREFIXES: [&str; 7] = [
    "schedule.",
    "codec.",
    "image.",
    "encoder.",
    "backbone.",
    "corpus.",
    "pretrain.",
];

const SCHEMA: &[(&str, Kind, &str)] = &[
    ("schedule.steps", Kind::Int, "64"),
    ("schedule.beta_start", Kind::Real, "0.001"),
    ("schedule.beta_end", Kind::Real, "0.2"),
    ("schedule.sigma", Kind::Text, "beta"),
    ("image.size", Kind::Int, "32"),
    ("codec.patch_size", Kind::Int, "4"),
    ("codec.seed", Kind::Int, "11"),
    ("encoder.patch", Kind::Int, "8"),
    ("encoder.hidden", Kind::Int, "128"),
    ("encoder.embed_dim", Kind::Int, "64"),
    ("encoder.seed", Kind::Int, "17"),
    ("backbone.channels", Kind::Int, "32"),
    ("backbone.time_dim", Kind::Int, "64"),
    ("backbone.groups", Kind::Int, "8"),
    ("backbone.dtype", Kind::Text, "f32"),
    ("corpus.size", Kind::Int, "200"),
    ("corpus.seed", Kind::Int, "7"),
    ("pretrain.steps", Kind::Int, "8000"),
    ("pretrain.batch", Kind::Int, "16"),
    ("pretrain.lr", Kind::Real, "0.002"),
    ("pretrain.image_cond_prob", Kind::Real, "0.5"),
    ("pretrain.init_seed", Kind::Int, "1"),
    ("pretrain.seed", Kind::Int, "2"),
    ("pretrain.weighting", Kind::Text, "truncated-snr"),
    ("inversion.layers", Kind::Int, "3"),
    ("inversion.dropout", Kind::Real, "0.05"),
    ("inversion.tokens", Kind::Int, "1"),
    ("inversion.init_noise", Kind::Real, "0.01"),
    ("inversion.init_seed", Kind::Int, "5"),
    ("inversion.steps", Kind::Int, "1000"),
    ("inversion.base_lr", Kind::Real, "0.001"),
    ("inversion.devices", Kind::Int, "1"),
    ("inversion.batch", Kind::Int, "1"),
    ("inversion.seed", Kind::Int, "0"),
    ("inversion.template", Kind::Text, "a painting of [C]"),
    ("inversion.eval_every", Kind::Int, "10"),
    ("inversion.probe_size", Kind::Int, "32"),
    ("inversion.probe_seed", Kind::Int, "99"),
    ("inversion.direct_init_word", Kind::Text, "painting"),
    ("generate.strength", Kind::Real, "0.6"),
    ("generate.mode", Kind::Text, "stochastic"),
    ("eval.samples", Kind::Int, "8"),
    ("eval.seed", Kind::Int, "1000"),
    ("bench.seeds", Kind::Int, "5"),
    ("bench.reference_steps", Kind::Int, "5000"),
    ("bench.max_steps", Kind::Int, "5000"),
    ("bench.threshold_rule", Kind::Text, "gap"),
    ("bench.threshold_factor", Kind::Real, "1.05"),
    ("bench.threshold_gap", Kind::Real, "0.05"),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

fn normalise(key: &str, value: &str) -> Result<String> {
    let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
    let value = value.trim();
    match kind {
        Kind::Int => value
            .parse::<u64>()
            .map(|v| v.to_string())
            .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}"))),
        Kind::Real => value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|v| v.to_string())
            .ok_or_else(|| Error::Config(format!("{key}: expected a finite number, got {value:?}"))),
        Kind::Text => {
            if value.contains('\n') {
                Err(Error::Config(format!("{key}: value must be a single line")))
            } else {
                Ok(value.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|(k, _, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = normalise(key, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)?;
        self.validate()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} missing from schema"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("normalised integer")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("normalised integer")
    }

    pub fn real(&self, key: &str) -> f64 {
        self.get(key).parse().expect("normalised number")
    }

    /// Sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn model_canonical(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| MODEL_PREFIXES.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the model-defining keys.
    pub fn hash(&self) -> String {
        digest::sha256_hex(self.model_canonical().as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.denoiser()?.validate()?;
        self.dtype()?;
        let size = self.int("image.size");
        let patch = self.int("codec.patch_size");
        if patch == 0 || size % patch != 0 {
            return Err(Error::Config(
                "image.size must be a multiple of codec.patch_size".into(),
            ));
        }
        if self.int("encoder.patch") == 0 || size % self.int("encoder.patch") != 0 {
            return Err(Error::Config("image.size must be a multiple of encoder.patch".into()));
        }
        let p = self.real("pretrain.image_cond_prob");
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config("pretrain.image_cond_prob must be in [0, 1]".into()));
        }
        let d = self.real("inversion.dropout");
        if !(0.0..1.0).contains(&d) {
            return Err(Error::Config("inversion.dropout must be in [0, 1)".into()));
        }
        let s = self.real("generate.strength");
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config("generate.strength must be in [0, 1]".into()));
        }
        self.get("pretrain.weighting").parse::<LossWeighting>()?;
        self.threshold_rule()?;
        self.get("generate.mode")
            .parse::<crate::synthesis::SampleMode>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let mode: SigmaMode = self
            .get("schedule.sigma")
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        NoiseSchedule::linear(
            self.int("schedule.steps"),
            self.real("schedule.beta_start"),
            self.real("schedule.beta_end"),
            mode,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.get("backbone.dtype") {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!(
                "backbone.dtype must be f32 or f64, got {other:?}"
            ))),
        }
    }

    pub fn encoder(&self) -> ImageEncoderConfig {
        ImageEncoderConfig {
            image_size: self.int("image.size"),
            patch_size: self.int("encoder.patch"),
            hidden: self.int("encoder.hidden"),
            embed_dim: self.int("encoder.embed_dim"),
            seed: self.u64("encoder.seed"),
        }
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let size = self.int("image.size");
        let patch = self.int("codec.patch_size").max(1);
        Ok(DenoiserConfig {
            latent_channels: 3 * patch * patch,
            latent_size: size / patch,
            channels: self.int("backbone.channels"),
            embed_dim: self.int("encoder.embed_dim"),
            time_dim: self.int("backbone.time_dim"),
            groups: self.int("backbone.groups"),
        })
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.int("pretrain.steps"),
            batch_size: self.int("pretrain.batch"),
            lr: self.real("pretrain.lr"),
            image_cond_prob: self.real("pretrain.image_cond_prob"),
            init_seed: self.u64("pretrain.init_seed"),
            seed: self.u64("pretrain.seed"),
            weighting: self.get("pretrain.weighting").parse().expect("validated"),
        }
    }

    pub fn inversion_module(&self) -> InversionConfig {
        InversionConfig {
            layers: self.int("inversion.layers"),
            dropout: self.real("inversion.dropout"),
            tokens: self.int("inversion.tokens"),
            init_noise: self.real("inversion.init_noise"),
            seed: self.u64("inversion.init_seed"),
        }
    }

    pub fn inversion_training(&self) -> InversionTrainConfig {
        InversionTrainConfig {
            steps: self.int("inversion.steps"),
            base_lr: self.real("inversion.base_lr"),
            device_count: self.int("inversion.devices"),
            batch_size: self.int("inversion.batch"),
            lr_override: None,
            seed: self.u64("inversion.seed"),
            template: self.get("inversion.template").to_string(),
            eval_every: self.int("inversion.eval_every"),
            probe_size: self.int("inversion.probe_size"),
            probe_seed: self.u64("inversion.probe_seed"),
            stop_below: None,
            direct_init_word: self.get("inversion.direct_init_word").to_string(),
        }
    }

    pub fn threshold_rule(&self) -> Result<ThresholdRule> {
        match self.get("bench.threshold_rule") {
            "relative" => Ok(ThresholdRule::Relative(self.real("bench.threshold_factor"))),
            "gap" => Ok(ThresholdRule::Gap(self.real("bench.threshold_gap"))),
            other => Err(Error::Config(format!(
                "bench.threshold_rule must be relative or gap, got {other:?}"
            ))),
        }
    }

    /// Benchmark settings with seeds `0..bench.seeds`.
    pub fn bench(&self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            seeds: (0..self.u64("bench.seeds")).collect(),
            reference_steps: self.int("bench.reference_steps"),
            max_steps: self.int("bench.max_steps"),
            rule: self.threshold_rule()?,
            train: self.inversion_training(),
            module: self.inversion_module(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn spelling_does_not_change_hash() {
        let a = RunConfig::parse("pretrain.lr = 2e-3\n").unwrap();
        let b = RunConfig::parse("pretrain.lr=0.002 # same\n").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn only_model_keys_enter_the_hash() {
        let base = RunConfig::default().hash();
        let inv = RunConfig::parse("inversion.steps = 7").unwrap();
        assert_eq!(inv.hash(), base);
        let model = RunConfig::parse("pretrain.steps = 7").unwrap();
        assert_ne!(model.hash(), base);
    }

    #[test]
    fn canonical_text_round_trips() {
        let a = RunConfig::parse("corpus.size = 12\ninversion.template = a fine painting of [C]").unwrap();
        let b = RunConfig::parse(&a.canonical()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("corpus.size = -1").is_err());
        assert!(RunConfig::parse("pretrain.lr = nan").is_err());
        assert!(RunConfig::parse("corpus.size").is_err());
        assert!(RunConfig::parse("codec.patch_size = 5").is_err());
        assert!(RunConfig::parse("schedule.beta_end = 1.5").is_err());
        assert!(RunConfig::parse("generate.mode = ddim").is_err());
    }
}
