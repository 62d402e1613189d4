//! Builds frozen models from a [`RunConfig`], either by pretraining or from
//! a checkpoint.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::codec::Codec;
use crate::conditioning::{ImageEncoder, Vocabulary};
use crate::config::RunConfig;
use crate::corpus::{caption_words, generate_corpus, CorpusExample};
use crate::denoiser::{Denoiser, TOKEN_EMBEDDING};
use crate::error::{Error, Result};
use crate::persist::Checkpoint;
use crate::pretrain::pretrain_backbone;
use crate::synthesis::FrozenModel;

pub fn codec(cfg: &RunConfig) -> Result<Codec> {
    let size = cfg.int("image.size");
    Codec::new(cfg.int("codec.patch_size"), cfg.u64("codec.seed"), size, size)
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<CorpusExample>> {
    generate_corpus(cfg.int("corpus.size"), cfg.u64("corpus.seed"), cfg.int("image.size"))
}

/// Pretrains a backbone; returns the model and its per-step loss.
pub fn pretrain(cfg: &RunConfig) -> Result<(FrozenModel, Vec<f64>)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let codec = codec(cfg)?;
    let encoder = ImageEncoder::new(cfg.encoder())?;
    let out = pretrain_backbone(
        &corpus(cfg)?,
        &sched,
        &caption_words(),
        &codec,
        &encoder,
        &cfg.denoiser()?,
        &cfg.pretrain(),
        cfg.dtype()?,
    )?;
    let model = FrozenModel {
        denoiser: out.denoiser,
        vocab: out.vocab,
        codec,
        encoder,
        sched,
        config_hash: cfg.hash(),
    };
    Ok((model, out.losses))
}

pub fn to_checkpoint(model: &FrozenModel, cfg: &RunConfig) -> Checkpoint {
    let mut tensors: BTreeMap<String, Tensor> = model.denoiser.parameters().clone();
    tensors.insert(TOKEN_EMBEDDING.to_string(), model.vocab.table().clone());
    Checkpoint {
        config_hash: model.config_hash.clone(),
        config_text: cfg.canonical(),
        tensors,
    }
}

/// Rebuilds the frozen model. The embedded config must hash to the
/// checkpoint's recorded hash.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(FrozenModel, RunConfig)> {
    let cfg = RunConfig::parse(&ck.config_text)?;
    if cfg.hash() != ck.config_hash {
        return Err(Error::HashMismatch {
            expected: ck.config_hash.clone(),
            found: cfg.hash(),
        });
    }
    let dtype = cfg.dtype()?;
    let tensors = ck
        .tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let table = tensors
        .get(TOKEN_EMBEDDING)
        .ok_or_else(|| Error::Config(format!("checkpoint has no {TOKEN_EMBEDDING}")))?
        .clone();
    let model = FrozenModel {
        denoiser: Denoiser::from_parameters(cfg.denoiser()?, &tensors)?,
        vocab: Vocabulary::new(caption_words(), table)?,
        codec: codec(&cfg)?,
        encoder: ImageEncoder::new(cfg.encoder())?,
        sched: cfg.schedule()?,
        config_hash: ck.config_hash.clone(),
    };
    Ok((model, cfg))
}
