//! Attention-based textual inversion.
//!
//! A stack of cross-attention layers maps the frozen image embedding to the
//! pseudo-word vectors: the recurrence starts at `v_0 = tau(y)`, and each
//! layer attends from `W_Q v_i` to keys `W_K tau(y)` and values
//! `W_V tau(y)`. The final token sequence is mean-pooled and projected by a
//! linear head to `L_v` vectors. Only the module's parameters are trained;
//! the denoiser, token table and image encoder stay fixed.
//!
//! [`direct_optimize`] runs the same loop with the raw embedding as the
//! optimization variable.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;

use crate::codec::{Codec, PixelImage};
use crate::conditioning::{
    assemble_conditioning, tokenize, ConditioningSequence, ImageEmbedding, ImageEncoder, PseudoWordEmbedding, TokenId,
    Vocabulary,
};
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_diffuse, LatentCode, NoiseMap, NoiseSchedule};
use crate::digest;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

/// Row-stochastic attention weights `softmax(Q K^T / sqrt(d))`.
pub fn attention_weights(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    let (_, qd) = q.dims2()?;
    let (_, kd) = k.dims2()?;
    if qd != kd {
        return Err(Error::shape(qd, kd));
    }
    if d == 0 {
        return Err(Error::InvalidArgument(
            "attention scale dimension must be positive".into(),
        ));
    }
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, d: usize) -> Result<Tensor> {
    let (nk, _) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if nk != nv {
        return Err(Error::shape(nk, nv));
    }
    Ok(attention_weights(q, k, d)?.matmul(v)?)
}

/// Inverted-dropout multiplier: zero with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut SeededRng, dtype: DType) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    let data: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub layers: usize,
    pub dropout: f64,
    pub tokens: usize,
    /// Std of the noise added to the identity initialisation.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dropout: 0.05,
            tokens: 1,
            init_noise: 0.01,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Debug, Clone)]
pub struct InversionModule {
    layers: Vec<AttentionLayer>,
    head_w: Var,
    head_b: Var,
    dropout: f64,
    tokens: usize,
    dim: usize,
}

impl InversionModule {
    /// Identity-plus-noise attention weights and an identity head, so the
    /// untrained module emits roughly the pooled image embedding.
    pub fn new(dim: usize, cfg: &InversionConfig, dtype: DType) -> Result<Self> {
        if cfg.tokens == 0 || dim == 0 {
            return Err(Error::InvalidArgument("need at least one token and dimension".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        let mut r = rng::stream(cfg.seed, 0x1A77);
        let dev = Device::Cpu;
        let eye = Tensor::eye(dim, DType::F64, &dev)?;
        let mut near_identity = || -> Result<Var> {
            let noise = Tensor::from_vec(rng::gaussian_vec(&mut r, dim * dim), (dim, dim), &dev)?;
            Ok(Var::from_tensor(&(&eye + (noise * cfg.init_noise)?)?.to_dtype(dtype)?)?)
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(AttentionLayer {
                wq: near_identity()?,
                wk: near_identity()?,
                wv: near_identity()?,
            });
        }
        let head = Tensor::cat(&vec![eye; cfg.tokens], 0)?.to_dtype(dtype)?;
        Ok(Self {
            layers,
            head_w: Var::from_tensor(&head)?,
            head_b: Var::from_tensor(&Tensor::zeros(cfg.tokens * dim, dtype, &dev)?)?,
            dropout: cfg.dropout,
            tokens: cfg.tokens,
            dim,
        })
    }

    pub fn layers(&self) -> &[AttentionLayer] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self
            .layers
            .iter()
            .flat_map(|l| [l.wq.clone(), l.wk.clone(), l.wv.clone()])
            .collect();
        v.push(self.head_w.clone());
        v.push(self.head_b.clone());
        v
    }

    pub fn checksum(&self) -> String {
        let vars = self.vars();
        digest::tensors_sha256(vars.iter().map(|v| v.as_tensor()))
    }

    /// Runs the attention recurrence and pooling head. Train mode needs a
    /// dropout stream; eval mode is deterministic and ignores `rng`.
    pub fn forward(
        &self,
        img: &ImageEmbedding,
        mode: Mode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<PseudoWordEmbedding> {
        if img.dim() != self.dim {
            return Err(Error::shape(self.dim, img.dim()));
        }
        if mode == Mode::Train && rng.is_none() {
            return Err(Error::InvalidArgument("train mode requires a dropout stream".into()));
        }
        let dtype = self.head_w.dtype();
        let tau = img.tokens().to_dtype(dtype)?;
        let mut v = tau.clone();
        for layer in &self.layers {
            let q = v.matmul(&layer.wq.as_tensor().t()?)?;
            let k = tau.matmul(&layer.wk.as_tensor().t()?)?;
            let val = tau.matmul(&layer.wv.as_tensor().t()?)?;
            v = attention(&q, &k, &val, self.dim)?;
            if mode == Mode::Train && self.dropout > 0.0 {
                let r = rng.as_deref_mut().expect("checked above");
                let mask = dropout_mask(v.dims2()?, self.dropout, r, dtype)?;
                v = (v * mask)?;
            }
        }
        let pooled = v.mean_keepdim(0)?;
        let out = pooled
            .matmul(&self.head_w.as_tensor().t()?)?
            .broadcast_add(&self.head_b.as_tensor().unsqueeze(0)?)?;
        PseudoWordEmbedding::new(out.reshape((self.tokens, self.dim))?)
    }
}

/// `multi_attn` in functional form.
pub fn multi_attn(
    img: &ImageEmbedding,
    module: &InversionModule,
    mode: Mode,
    rng: Option<&mut SeededRng>,
) -> Result<PseudoWordEmbedding> {
    module.forward(img, mode, rng)
}

/// Mean squared error between `eps` and the denoiser's prediction at the
/// forward-diffused `z_t`. Differentiable in the conditioning vectors.
pub fn ldm_loss(
    z0: &LatentCode,
    cond: &ConditioningSequence,
    t: usize,
    eps: &NoiseMap,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = forward_diffuse(z0, t, eps, sched)?;
    let pred = denoiser.forward(&z_t.tensor().unsqueeze(0)?, &[t], &cond.vectors().unsqueeze(0)?, None)?;
    let target = eps.tensor().unsqueeze(0)?.to_dtype(pred.dtype())?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// The same loss over a batch of `(t, eps)` pairs sharing one `z0` and
/// conditioning. `z0` is `(C, H, W)`, `eps` is `(B, C, H, W)`.
pub fn batched_ldm_loss(
    z0: &Tensor,
    cond: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let dtype = denoiser.dtype();
    let b = ts.len();
    let (a, s): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .map(|t| {
            sched.check_t(*t)?;
            Ok((sched.alpha_bar(*t).sqrt(), (1.0 - sched.alpha_bar(*t)).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let eps = eps.to_dtype(dtype)?;
    let z_t = (z0.to_dtype(dtype)?.unsqueeze(0)?.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?;
    let (l, d) = cond.dims2()?;
    let cond = cond.unsqueeze(0)?.broadcast_as((b, l, d))?;
    let pred = denoiser.forward(&z_t, ts, &cond, None)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Fixed `(t, eps)` pairs for comparing embeddings on equal footing.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl ProbeSet {
    /// Timesteps evenly spread over `1..=T`, Gaussian noise from `seed`.
    pub fn new(size: usize, seed: u64, shape: (usize, usize, usize), sched: &NoiseSchedule) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("probe set must be non-empty".into()));
        }
        let steps = sched.steps();
        let ts = (0..size).map(|k| 1 + (k * steps) / size).collect();
        let mut r = rng::stream(seed, 0x9B0B);
        let n = shape.0 * shape.1 * shape.2;
        let eps = Tensor::from_vec(
            rng::gaussian_vec(&mut r, size * n),
            (size, shape.0, shape.1, shape.2),
            &Device::Cpu,
        )?;
        Ok(Self { ts, eps })
    }

    pub fn loss(
        &self,
        z0: &LatentCode,
        cond: &ConditioningSequence,
        denoiser: &Denoiser,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let loss = batched_ldm_loss(
            z0.tensor(),
            &cond.vectors().detach(),
            &self.ts,
            &self.eps,
            denoiser,
            sched,
        )?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub device_count: usize,
    pub batch_size: usize,
    pub lr_override: Option<f64>,
    pub seed: u64,
    pub template: String,
    /// Probe-loss evaluation period in steps; 0 disables evaluation.
    pub eval_every: usize,
    pub probe_size: usize,
    pub probe_seed: u64,
    /// Stop as soon as the probe loss is at or below this value.
    pub stop_below: Option<f64>,
    /// Initial word for the direct-optimization baseline.
    pub direct_init_word: String,
}

impl Default for InversionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            base_lr: 1e-3,
            device_count: 1,
            batch_size: 1,
            lr_override: None,
            seed: 0,
            template: "a painting of [C]".into(),
            eval_every: 10,
            probe_size: 32,
            probe_seed: 99,
            stop_below: None,
            direct_init_word: "painting".into(),
        }
    }
}

impl InversionTrainConfig {
    /// Base rate scaled by device count and batch size, unless overridden.
    pub fn effective_lr(&self) -> f64 {
        self.lr_override
            .unwrap_or(self.base_lr * self.device_count as f64 * self.batch_size as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Attention,
    Direct,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Attention => "attention",
            Variant::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub variant: Variant,
    pub embedding: PseudoWordEmbedding,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    /// Seconds since the start of the run at the end of every step.
    pub step_times: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub steps_run: usize,
    pub effective_lr: f64,
    /// First evaluated step whose probe loss met `stop_below`.
    pub reached_at: Option<usize>,
}

impl TrainingRun {
    pub fn best_eval(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.loss).min_by(|a, b| a.total_cmp(b))
    }

    /// Mean training loss over `window` steps ending at `step` (exclusive).
    pub fn smoothed_loss(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(window);
        let slice = &self.losses[start..end];
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }
}

pub struct InversionOutcome {
    pub module: InversionModule,
    pub run: TrainingRun,
}

/// Frozen models plus the reference image, shared by both training variants.
pub struct InversionContext<'a> {
    pub denoiser: &'a Denoiser,
    pub codec: &'a Codec,
    pub encoder: &'a ImageEncoder,
    pub vocab: &'a Vocabulary,
    pub sched: &'a NoiseSchedule,
}

impl InversionContext<'_> {
    fn frozen_checksums(&self) -> [String; 3] {
        [
            self.denoiser.checksum(),
            self.encoder.checksum(),
            digest::tensors_sha256([self.vocab.table()]),
        ]
    }
}

trait EmbeddingSource {
    fn vars(&self) -> Vec<Var>;
    fn embedding(&self, mode: Mode, rng: &mut SeededRng) -> Result<PseudoWordEmbedding>;
}

struct AttentionSource<'a> {
    module: &'a InversionModule,
    img: ImageEmbedding,
}

impl EmbeddingSource for AttentionSource<'_> {
    fn vars(&self) -> Vec<Var> {
        self.module.vars()
    }

    fn embedding(&self, mode: Mode, rng: &mut SeededRng) -> Result<PseudoWordEmbedding> {
        self.module.forward(&self.img, mode, Some(rng))
    }
}

struct DirectSource {
    v: Var,
}

impl EmbeddingSource for DirectSource {
    fn vars(&self) -> Vec<Var> {
        vec![self.v.clone()]
    }

    fn embedding(&self, _mode: Mode, _rng: &mut SeededRng) -> Result<PseudoWordEmbedding> {
        PseudoWordEmbedding::new(self.v.as_tensor().clone())
    }
}

fn run_loop(
    source: &dyn EmbeddingSource,
    variant: Variant,
    y: &PixelImage,
    ctx: &InversionContext<'_>,
    cfg: &InversionTrainConfig,
) -> Result<TrainingRun> {
    if cfg.batch_size == 0 || cfg.device_count == 0 {
        return Err(Error::InvalidArgument(
            "batch size and device count must be positive".into(),
        ));
    }
    let before = ctx.frozen_checksums();
    let template: Vec<TokenId> = tokenize(&cfg.template, ctx.vocab)?;
    let z0 = ctx.codec.encode(y)?;
    let shape = z0.shape();
    let probe = if cfg.eval_every > 0 {
        Some(ProbeSet::new(cfg.probe_size, cfg.probe_seed, shape, ctx.sched)?)
    } else {
        None
    };
    let effective_lr = cfg.effective_lr();
    let mut opt = AdamW::new(
        source.vars(),
        ParamsAdamW {
            lr: effective_lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut r = rng::stream(cfg.seed, 0x7A1E);
    let mut dropout_rng = rng::stream(cfg.seed, 0xD409);
    let mut eval_rng = rng::stream(cfg.seed, 0xEFA1);
    let started = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut step_times = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut reached_at = None;
    let n = shape.0 * shape.1 * shape.2;
    let z0_model = z0.tensor().to_dtype(ctx.denoiser.dtype())?;

    let mut evaluate = |step: usize, evals: &mut Vec<EvalPoint>| -> Result<bool> {
        let Some(probe) = &probe else { return Ok(false) };
        let v = source.embedding(Mode::Eval, &mut eval_rng)?.detached();
        let cond = assemble_conditioning(&template, &v, ctx.vocab)?;
        let loss = probe.loss(&z0, &cond, ctx.denoiser, ctx.sched)?;
        evals.push(EvalPoint {
            step,
            loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        Ok(cfg.stop_below.is_some_and(|th| loss <= th))
    };

    let mut steps_run = 0;
    if evaluate(0, &mut evals)? {
        reached_at = Some(0);
    }
    while reached_at.is_none() && steps_run < cfg.steps {
        let v = source.embedding(Mode::Train, &mut dropout_rng)?;
        let cond = assemble_conditioning(&template, &v, ctx.vocab)?;
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(1..=ctx.sched.steps()))
            .collect();
        let eps = Tensor::from_vec(
            rng::gaussian_vec(&mut r, cfg.batch_size * n),
            (cfg.batch_size, shape.0, shape.1, shape.2),
            &Device::Cpu,
        )?;
        let loss = batched_ldm_loss(&z0_model, cond.vectors(), &ts, &eps, ctx.denoiser, ctx.sched)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: steps_run,
                loss: value,
            });
        }
        losses.push(value);
        opt.backward_step(&loss)?;
        step_times.push(started.elapsed().as_secs_f64());
        steps_run += 1;
        let due = cfg.eval_every > 0 && (steps_run % cfg.eval_every == 0 || steps_run == cfg.steps);
        if due && evaluate(steps_run, &mut evals)? {
            reached_at = Some(steps_run);
        }
    }

    let after = ctx.frozen_checksums();
    if before != after {
        return Err(Error::FrozenViolation(format!("checksums {before:?} -> {after:?}")));
    }
    let embedding = source.embedding(Mode::Eval, &mut eval_rng)?.detached();
    Ok(TrainingRun {
        variant,
        embedding,
        losses,
        step_times,
        evals,
        steps_run,
        effective_lr,
        reached_at,
    })
}

/// Trains an inversion module on the single image `y` and returns it with
/// the resulting pseudo-word embedding.
pub fn train_inversion(
    y: &PixelImage,
    ctx: &InversionContext<'_>,
    module_cfg: &InversionConfig,
    cfg: &InversionTrainConfig,
) -> Result<InversionOutcome> {
    let module = InversionModule::new(ctx.vocab.embed_dim(), module_cfg, ctx.denoiser.dtype())?;
    let img = ctx.encoder.encode(y)?;
    let source = AttentionSource { module: &module, img };
    let run = run_loop(&source, Variant::Attention, y, ctx, cfg)?;
    Ok(InversionOutcome { module, run })
}

/// Baseline: optimizes the embedding vector itself, starting from the
/// table row of `cfg.direct_init_word`.
pub fn direct_optimize(y: &PixelImage, ctx: &InversionContext<'_>, cfg: &InversionTrainConfig) -> Result<TrainingRun> {
    let id = ctx
        .vocab
        .id(&cfg.direct_init_word)
        .ok_or_else(|| Error::UnknownToken(cfg.direct_init_word.clone()))?;
    let v = Var::from_tensor(&ctx.vocab.row(id)?.copy()?)?;
    run_loop(&DirectSource { v }, Variant::Direct, y, ctx, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn two_key_hand_computation() {
        let out = attention(&t2(&[&[1.0]]), &t2(&[&[1.0], &[-1.0]]), &t2(&[&[2.0], &[0.0]]), 1).unwrap();
        let w = attention_weights(&t2(&[&[1.0]]), &t2(&[&[1.0], &[-1.0]]), 1)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert!((w[0][0] - 0.880797).abs() < 1e-6);
        assert!((w[0][1] - 0.119203).abs() < 1e-6);
        assert!((out.to_vec2::<f64>().unwrap()[0][0] - 1.761594).abs() < 1e-6);
    }

    #[test]
    fn singleton_and_uniform_cases() {
        let v = t2(&[&[3.0, -1.0]]);
        let out = attention(&t2(&[&[5.0, 2.0], &[-1.0, 0.3]]), &t2(&[&[0.4, 0.1]]), &v, 2).unwrap();
        for row in out.to_vec2::<f64>().unwrap() {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12);
        }
        // Q orthogonal to every key: all scores zero.
        let vals = t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let out = attention(
            &t2(&[&[0.0, 1.0]]),
            &t2(&[&[1.0, 0.0], &[2.0, 0.0], &[-3.0, 0.0]]),
            &vals,
            2,
        )
        .unwrap();
        let row = &out.to_vec2::<f64>().unwrap()[0];
        assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(attention(&t2(&[&[1.0, 2.0]]), &t2(&[&[1.0]]), &t2(&[&[1.0]]), 1).is_err());
        assert!(attention(&t2(&[&[1.0]]), &t2(&[&[1.0], &[2.0]]), &t2(&[&[1.0]]), 1).is_err());
    }

    #[test]
    fn dropout_rate_is_close_to_p() {
        let mut r = rng::seeded(8);
        let m = dropout_mask((1000, 100), 0.05, &mut r, DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let zeros = m.iter().filter(|v| **v == 0.0).count() as f64 / m.len() as f64;
        assert!((0.045..=0.055).contains(&zeros), "{zeros}");
        assert!(dropout_mask((2, 2), 1.0, &mut r, DType::F64).is_err());
    }

    fn random_embedding(seed: u64, n: usize, d: usize) -> ImageEmbedding {
        let mut r = rng::seeded(seed);
        ImageEmbedding::new(Tensor::from_vec(rng::gaussian_vec(&mut r, n * d), (n, d), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn zero_layers_pool_the_embedding() {
        let cfg = InversionConfig {
            layers: 0,
            ..Default::default()
        };
        let m = InversionModule::new(6, &cfg, DType::F64).unwrap();
        let img = random_embedding(1, 5, 6);
        let v = m.forward(&img, Mode::Eval, None).unwrap();
        let mean = img.pooled().unwrap().to_vec2::<f64>().unwrap();
        let got = v.vectors().to_vec2::<f64>().unwrap();
        for (a, b) in got[0].iter().zip(&mean[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_needs_rng() {
        let m = InversionModule::new(8, &InversionConfig::default(), DType::F64).unwrap();
        let img = random_embedding(2, 4, 8);
        let a = m
            .forward(&img, Mode::Eval, None)
            .unwrap()
            .vectors()
            .to_vec2::<f64>()
            .unwrap();
        let b = m
            .forward(&img, Mode::Eval, None)
            .unwrap()
            .vectors()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(a, b);
        assert!(m.forward(&img, Mode::Train, None).is_err());
        let mut r = rng::seeded(1);
        assert!(m.forward(&img, Mode::Train, Some(&mut r)).is_ok());
        assert!(m.forward(&random_embedding(2, 4, 7), Mode::Eval, None).is_err());
    }

    #[test]
    fn token_permutation_does_not_change_output() {
        let m = InversionModule::new(
            8,
            &InversionConfig {
                init_noise: 0.3,
                ..Default::default()
            },
            DType::F64,
        )
        .unwrap();
        let img = random_embedding(3, 6, 8);
        let perm = Tensor::new(&[4u32, 2, 0, 5, 1, 3], &Device::Cpu).unwrap();
        let shuffled = ImageEmbedding::new(img.tokens().index_select(&perm, 0).unwrap()).unwrap();
        let a = m
            .forward(&img, Mode::Eval, None)
            .unwrap()
            .vectors()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let b = m
            .forward(&shuffled, Mode::Eval, None)
            .unwrap()
            .vectors()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn effective_learning_rate_rule() {
        let mut cfg = InversionTrainConfig::default();
        assert_eq!(cfg.effective_lr(), 1e-3);
        cfg.device_count = 4;
        cfg.batch_size = 10;
        assert!((cfg.effective_lr() - 0.04).abs() < 1e-15);
        cfg.lr_override = Some(0.5);
        assert_eq!(cfg.effective_lr(), 0.5);
    }
}
