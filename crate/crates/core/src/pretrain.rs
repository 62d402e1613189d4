//! Backbone pretraining on the procedural corpus.
//!
//! Captions condition the denoiser through the token table. A fraction of
//! examples instead use a placeholder template whose slot holds the
//! token-mean of the frozen image encoder's embedding, which ties the
//! image-embedding space to the conditioning space the inversion module
//! later writes into.
//!
//! The per-sample noise error can be weighted by `max(1, (1 - ab) / ab)`
//! ([`LossWeighting::TruncatedSnr`]), which puts the high-noise steps on the
//! scale of a clean-latent error. The logged loss is always unweighted.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;

use crate::codec::Codec;
use crate::conditioning::{tokenize, ImageEncoder, TokenId, Vocabulary};
use crate::corpus::{CorpusExample, Scale};
use crate::denoiser::{init_parameters, pad_conditioning, Denoiser, DenoiserConfig, TOKEN_EMBEDDING};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of conditioning an example on its pooled image embedding.
    pub image_cond_prob: f64,
    pub init_seed: u64,
    pub seed: u64,
    pub weighting: LossWeighting,
}

/// Per-timestep weight on the noise-prediction error during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    Uniform,
    /// `max(1, 1 / snr_t)`: the clean-latent error is weighted at least as
    /// much as the noise error, so high-noise steps still learn the
    /// conditional content.
    TruncatedSnr,
}

impl LossWeighting {
    pub fn weight(self, alpha_bar: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::TruncatedSnr => ((1.0 - alpha_bar) / alpha_bar).max(1.0),
        }
    }
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossWeighting::Uniform),
            "truncated-snr" => Ok(LossWeighting::TruncatedSnr),
            _ => Err(Error::Config(format!("unknown loss weighting {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::TruncatedSnr => "truncated-snr",
        })
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            image_cond_prob: 0.5,
            init_seed: 1,
            seed: 2,
            weighting: LossWeighting::TruncatedSnr,
        }
    }
}

pub struct PretrainOutcome {
    pub denoiser: Denoiser,
    pub vocab: Vocabulary,
    /// Per-step unweighted training loss.
    pub losses: Vec<f64>,
}

impl PretrainOutcome {
    /// Mean loss over a window at the start and end of training.
    pub fn running_losses(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let head = self.losses[..w].iter().sum::<f64>() / w as f64;
        let tail = self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64;
        (head, tail)
    }
}

/// Templates used for image-conditioned examples.
fn image_template(scale: Option<Scale>) -> String {
    match scale {
        Some(s) => format!("a {} painting of [C]", s.word()),
        None => "a painting of [C]".to_string(),
    }
}

/// Caption with the scale word dropped.
fn short_caption(caption: &str) -> String {
    let mut words: Vec<&str> = caption.split(' ').collect();
    if words.len() == 7 {
        words.remove(1);
    }
    words.join(" ")
}

struct Prepared {
    latents: Tensor,
    pooled: Vec<Tensor>,
    captions: Vec<[Vec<TokenId>; 2]>,
    image_templates: Vec<[Vec<TokenId>; 2]>,
}

fn prepare(
    corpus: &[CorpusExample],
    codec: &Codec,
    encoder: &ImageEncoder,
    vocab_words: &Vocabulary,
    dtype: DType,
) -> Result<Prepared> {
    let mut latents = Vec::with_capacity(corpus.len());
    let mut pooled = Vec::with_capacity(corpus.len());
    let mut captions = Vec::with_capacity(corpus.len());
    let mut image_templates = Vec::with_capacity(corpus.len());
    for ex in corpus {
        latents.push(codec.encode(&ex.image)?.tensor().to_dtype(dtype)?);
        pooled.push(encoder.encode(&ex.image)?.pooled()?.to_dtype(dtype)?);
        captions.push([
            tokenize(&ex.caption, vocab_words)?,
            tokenize(&short_caption(&ex.caption), vocab_words)?,
        ]);
        image_templates.push([
            tokenize(&image_template(Some(ex.spec.scale)), vocab_words)?,
            tokenize(&image_template(None), vocab_words)?,
        ]);
    }
    Ok(Prepared {
        latents: Tensor::stack(&latents, 0)?,
        pooled,
        captions,
        image_templates,
    })
}

fn embed(ids: &[TokenId], placeholder: TokenId, table: &Tensor, slot: &Tensor) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(3);
    let mut run = Vec::new();
    for id in ids {
        if *id == placeholder {
            if !run.is_empty() {
                parts.push(table.index_select(&Tensor::new(run.as_slice(), &Device::Cpu)?, 0)?);
                run.clear();
            }
            parts.push(slot.clone());
        } else {
            run.push(*id);
        }
    }
    if !run.is_empty() {
        parts.push(table.index_select(&Tensor::new(run.as_slice(), &Device::Cpu)?, 0)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains the denoiser and token table with the conditioned noise-prediction
/// loss. Deterministic given the configs.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_backbone(
    corpus: &[CorpusExample],
    sched: &NoiseSchedule,
    words: &[String],
    codec: &Codec,
    encoder: &ImageEncoder,
    dcfg: &DenoiserConfig,
    cfg: &PretrainConfig,
    dtype: DType,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let init = init_parameters(dcfg, words.len(), cfg.init_seed, dtype)?;
    let vars: BTreeMap<String, Var> = init
        .iter()
        .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
        .collect::<Result<_>>()?;
    let tensors: BTreeMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let model = Denoiser::from_parameters(dcfg.clone(), &tensors)?;
    let table = tensors[TOKEN_EMBEDDING].clone();
    let lookup_vocab = Vocabulary::new(words.to_vec(), table.clone())?;
    let placeholder = lookup_vocab.placeholder_id();
    let data = prepare(corpus, codec, encoder, &lookup_vocab, dtype)?;

    let mut opt = AdamW::new(
        vars.values().cloned().collect(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut r = rng::stream(cfg.seed, 0x9E7A);
    let steps = sched.steps();
    let shape = data.latents.dims()[1..].to_vec();
    let per_example: usize = shape.iter().product();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let idx: Vec<u32> = (0..b).map(|_| r.gen_range(0..corpus.len()) as u32).collect();
        let ts: Vec<usize> = (0..b).map(|_| r.gen_range(1..=steps)).collect();
        let mut conds = Vec::with_capacity(b);
        for &i in &idx {
            let i = i as usize;
            let variant = r.gen_range(0..2);
            let seq = if r.gen::<f64>() < cfg.image_cond_prob {
                embed(&data.image_templates[i][variant], placeholder, &table, &data.pooled[i])?
            } else {
                embed(&data.captions[i][variant], placeholder, &table, &data.pooled[i])?
            };
            conds.push(seq);
        }
        let (cond, mask) = pad_conditioning(&conds)?;
        let z0 = data
            .latents
            .index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        let eps = Tensor::from_vec(
            rng::gaussian_vec(&mut r, b * per_example),
            (b, shape[0], shape[1], shape[2]),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        let (a, s): (Vec<f64>, Vec<f64>) = ts
            .iter()
            .map(|t| (sched.alpha_bar(*t).sqrt(), (1.0 - sched.alpha_bar(*t)).sqrt()))
            .unzip();
        let a = Tensor::from_vec(a, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let s = Tensor::from_vec(s, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let z_t = (z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?;
        let pred = model.forward(&z_t, &ts, &cond, mask.as_ref())?;
        let per_sample = (pred - &eps)?.sqr()?.flatten_from(1)?.mean(1)?;
        let value = per_sample.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let w: Vec<f64> = ts.iter().map(|t| cfg.weighting.weight(sched.alpha_bar(*t))).collect();
        let w = Tensor::from_vec(w, b, &Device::Cpu)?.to_dtype(dtype)?;
        opt.backward_step(&(per_sample * w)?.mean_all()?)?;
    }

    let frozen: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
        .collect::<Result<_>>()?;
    let denoiser = Denoiser::from_parameters(dcfg.clone(), &frozen)?;
    let vocab = Vocabulary::new(words.to_vec(), frozen[TOKEN_EMBEDDING].clone())?;
    Ok(PretrainOutcome {
        denoiser,
        vocab,
        losses,
    })
}
