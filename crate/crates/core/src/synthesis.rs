//! Example-guided generation: text-to-image, image-to-image transfer with
//! inverted detail noise, and per-channel tone matching.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};

use crate::codec::{Codec, PixelImage};
use crate::conditioning::{
    assemble_conditioning, condition_on, tokenize, ConditioningSequence, ImageEncoder, PseudoWordEmbedding, Vocabulary,
};
use crate::denoiser::Denoiser;
use crate::diffusion::{
    chain_latent, invert_trajectory, reverse_chain, LatentCode, NoiseMap, NoisePredictor, NoiseSchedule, StepNoise,
};
use crate::error::{Error, Result};
use crate::inversion::InversionContext;
use crate::rng;

/// A learned pseudo-word and where it came from.
#[derive(Debug, Clone)]
pub struct StyleRecord {
    pub embedding: PseudoWordEmbedding,
    pub template: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
}

/// Wraps a predictor so the implied clean latent stays inside the codec's
/// image range: `x0 = (z_t - sqrt(1 - ab) eps) / sqrt(ab)` is decoded,
/// clipped to [0, 1], re-encoded, and the noise recomputed from it.
pub struct ClippedPredictor<'a> {
    pub inner: &'a dyn NoisePredictor,
    pub codec: &'a Codec,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for ClippedPredictor<'_> {
    fn predict_noise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningSequence) -> Result<NoiseMap> {
        let eps = self.inner.predict_noise(z_t, t, cond)?;
        let ab = self.sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = ((z_t.tensor() - (eps.tensor() * sb)?)? / sa)?;
        let clipped = self.codec.encode(&self.codec.decode(&LatentCode::new(x0)?)?)?;
        NoiseMap::new(((z_t.tensor() - (clipped.tensor() * sa)?)? / sb)?)
    }
}

/// Everything that stays fixed after pretraining.
pub struct FrozenModel {
    pub denoiser: Denoiser,
    pub vocab: Vocabulary,
    pub codec: Codec,
    pub encoder: ImageEncoder,
    pub sched: NoiseSchedule,
    pub config_hash: String,
}

impl FrozenModel {
    pub fn context(&self) -> InversionContext<'_> {
        InversionContext {
            denoiser: &self.denoiser,
            codec: &self.codec,
            encoder: &self.encoder,
            vocab: &self.vocab,
            sched: &self.sched,
        }
    }

    /// The predictor every sampler uses.
    pub fn sampler(&self) -> ClippedPredictor<'_> {
        ClippedPredictor {
            inner: &self.denoiser,
            codec: &self.codec,
            sched: &self.sched,
        }
    }

    fn check_hash(&self, style: &StyleRecord) -> Result<()> {
        if style.config_hash != self.config_hash {
            return Err(Error::HashMismatch {
                expected: self.config_hash.clone(),
                found: style.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// The placeholder filled with the token-mean of the image's embedding,
    /// the same form the backbone saw during image-conditioned pretraining.
    pub fn image_conditioning(&self, template: &str, y: &PixelImage) -> Result<ConditioningSequence> {
        let pooled = self.encoder.encode(y)?.pooled()?;
        condition_on(template, &PseudoWordEmbedding::new(pooled)?, &self.vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "deterministic" => Ok(Self::Deterministic),
            _ => Err(Error::InvalidArgument(format!("unknown sampling mode {s:?}"))),
        }
    }
}

/// Source of the per-step noise in image-to-image transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetailNoise {
    /// Maps recovered from the content image's own trajectory.
    Inverted,
    /// Fresh seeded Gaussian noise, as in text-to-image.
    Fresh,
}

pub const DEFAULT_STRENGTH: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub style: StyleRecord,
    pub template: String,
    pub seed: u64,
    pub mode: SampleMode,
    pub strength: Option<f64>,
    pub content: Option<PixelImage>,
    pub detail: DetailNoise,
}

impl GenerationRequest {
    pub fn txt2img(style: StyleRecord, template: &str, seed: u64, mode: SampleMode) -> Self {
        Self {
            style,
            template: template.to_string(),
            seed,
            mode,
            strength: None,
            content: None,
            detail: DetailNoise::Inverted,
        }
    }

    pub fn transfer(style: StyleRecord, template: &str, seed: u64, content: PixelImage, strength: f64) -> Self {
        Self {
            style,
            template: template.to_string(),
            seed,
            mode: SampleMode::Stochastic,
            strength: Some(strength),
            content: Some(content),
            detail: DetailNoise::Inverted,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.strength.is_some() != self.content.is_some() {
            return Err(Error::InvalidArgument(
                "strength is required exactly when a content image is given".into(),
            ));
        }
        if let Some(s) = self.strength {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("strength {s} not in [0, 1]")));
            }
        }
        let ids = tokenize(&self.template, vocab)?;
        let n = ids.iter().filter(|i| **i == vocab.placeholder_id()).count();
        if n != 1 {
            return Err(Error::Placeholder(n));
        }
        Ok(())
    }

    fn conditioning(&self, vocab: &Vocabulary) -> Result<ConditioningSequence> {
        assemble_conditioning(&tokenize(&self.template, vocab)?, &self.style.embedding, vocab)
    }
}

/// Samples from pure noise conditioned on the style's pseudo-word.
pub fn txt2img(req: &GenerationRequest, model: &FrozenModel) -> Result<PixelImage> {
    if req.content.is_some() {
        return Err(Error::InvalidArgument("txt2img takes no content image".into()));
    }
    req.validate(&model.vocab)?;
    model.check_hash(&req.style)?;
    let cond = req.conditioning(&model.vocab)?;
    let shape = model.codec.latent_shape();
    let mut r = rng::stream(req.seed, 0x7E47);
    let z_t = LatentCode::new(NoiseMap::gaussian(shape, &mut r).into_tensor())?;
    let steps = model.sched.steps();
    let noise = match req.mode {
        SampleMode::Deterministic => StepNoise::Deterministic,
        SampleMode::Stochastic => StepNoise::Fresh(&mut r),
    };
    let chain = reverse_chain(z_t, steps, &model.sampler(), &cond, &model.sched, noise)?;
    model.codec.decode(chain.last().expect("chain has z_0"))
}

/// Reverse chain of an image-to-image request from `z_{t0}` down to `z_0`.
/// `detail_cond` conditions the inversion of the content's noise maps.
pub fn transfer_latents(
    req: &GenerationRequest,
    model: &FrozenModel,
    detail_cond: &ConditioningSequence,
) -> Result<Vec<LatentCode>> {
    req.validate(&model.vocab)?;
    model.check_hash(&req.style)?;
    let content = req
        .content
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("style transfer needs a content image".into()))?;
    let strength = req.strength.expect("validated");
    let z0 = model.codec.encode(content)?;
    let steps = model.sched.steps();
    let t0 = (strength * steps as f64).round() as usize;
    if t0 == 0 {
        return Ok(vec![z0]);
    }
    let cond = req.conditioning(&model.vocab)?;
    let z_t0 = chain_latent(&z0, t0, req.seed, &model.sched)?;
    match (req.mode, req.detail) {
        (SampleMode::Deterministic, _) => reverse_chain(
            z_t0,
            t0,
            &model.sampler(),
            &cond,
            &model.sched,
            StepNoise::Deterministic,
        ),
        (SampleMode::Stochastic, DetailNoise::Fresh) => {
            let mut r = rng::stream(req.seed, 0x7E47);
            reverse_chain(
                z_t0,
                t0,
                &model.sampler(),
                &cond,
                &model.sched,
                StepNoise::Fresh(&mut r),
            )
        }
        (SampleMode::Stochastic, DetailNoise::Inverted) => {
            let maps = invert_trajectory(&z0, &model.sched, &model.sampler(), detail_cond, req.seed)?;
            reverse_chain(
                z_t0,
                t0,
                &model.sampler(),
                &cond,
                &model.sched,
                StepNoise::Inverted(&maps),
            )
        }
    }
}

/// Re-renders `content` under the style. The detail noise is inverted with
/// the content's own image conditioning in the request template.
pub fn style_transfer(req: &GenerationRequest, model: &FrozenModel) -> Result<PixelImage> {
    let content = req
        .content
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("style transfer needs a content image".into()))?;
    req.validate(&model.vocab)?;
    let detail_cond = model.image_conditioning(&req.template, content)?;
    let chain = transfer_latents(req, model, &detail_cond)?;
    model.codec.decode(chain.last().expect("chain has z_0"))
}

/// Channel spread treated as constant.
const FLAT_STD: f64 = 1e-9;

fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let flat = x.reshape((c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    Ok((mean, var.sqrt()?))
}

/// Per-channel affine match of `result`'s moments to `target`'s, before
/// clipping. Channels of `result` with zero spread map to the target mean.
pub fn tone_transfer_unclipped(result: &PixelImage, target: &PixelImage) -> Result<Tensor> {
    let (tm, ts) = channel_moments(target.tensor())?;
    if ts.flatten_all()?.to_vec1::<f64>()?.iter().any(|s| *s < FLAT_STD) {
        return Err(Error::DegenerateStatistics("target has a constant channel".into()));
    }
    let (rm, rs) = channel_moments(result.tensor())?;
    let scale: Vec<f64> = rs
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .zip(ts.flatten_all()?.to_vec1::<f64>()?)
        .map(|(r, t)| if *r < FLAT_STD { 0.0 } else { t / r })
        .collect();
    let scale = Tensor::from_vec(scale, (3, 1), &Device::Cpu)?;
    let (c, h, w) = result.dims();
    let flat = result.tensor().reshape((c, h * w))?;
    let out = flat.broadcast_sub(&rm)?.broadcast_mul(&scale)?.broadcast_add(&tm)?;
    Ok(out.reshape((c, h, w))?.to_dtype(DType::F64)?)
}

pub fn tone_transfer(result: &PixelImage, target: &PixelImage) -> Result<PixelImage> {
    let out = tone_transfer_unclipped(result, target)?.clamp(0.0, 1.0)?;
    PixelImage::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize, w: usize) -> PixelImage {
        let mut r = rng::seeded(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rand::Rng::gen::<f64>(&mut r)).collect();
        PixelImage::from_vec_clipped(data, h, w).unwrap()
    }

    #[test]
    fn tone_transfer_identity() {
        let x = image(1, 6, 5);
        let y = tone_transfer(&x, &x).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-6);
    }

    #[test]
    fn tone_transfer_matches_moments() {
        let x = image(2, 8, 8);
        let target = image(3, 4, 12);
        let out = tone_transfer_unclipped(&x, &target).unwrap();
        let (om, os) = channel_moments(&out).unwrap();
        let (tm, ts) = channel_moments(target.tensor()).unwrap();
        for (a, b) in om
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .zip(tm.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        {
            assert!((a - b).abs() < 1e-4);
        }
        for (a, b) in os
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .zip(ts.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_target_is_degenerate() {
        let flat = PixelImage::from_vec_clipped(vec![0.3; 3 * 16], 4, 4).unwrap();
        assert!(matches!(
            tone_transfer(&image(4, 4, 4), &flat),
            Err(Error::DegenerateStatistics(_))
        ));
    }

    #[test]
    fn sample_mode_parses() {
        assert_eq!(
            "deterministic".parse::<SampleMode>().unwrap(),
            SampleMode::Deterministic
        );
        assert!("ddim".parse::<SampleMode>().is_err());
    }
}
