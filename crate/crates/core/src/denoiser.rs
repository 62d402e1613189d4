//! Small text-conditioned noise predictor over latents.
//!
//! Layout: `conv_in -> res0 -> attn0 -> res1 -> attn1 -> norm -> conv_out`.
//! Residual blocks receive a sinusoidal timestep embedding plus a projection
//! of the mean conditioning vector; attention blocks cross-attend from
//! latent positions to the conditioning sequence. A 1x1 skip from the input
//! latent, gated per channel by the timestep embedding, lets the network
//! pass noise through at high noise levels without squeezing it through the
//! trunk. The output convolution and the skip start at zero so an
//! untrained model predicts zero noise.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};

use crate::conditioning::ConditioningSequence;
use crate::diffusion::{LatentCode, NoiseMap, NoisePredictor};
use crate::digest;
use crate::error::{Error, Result};
use crate::rng;

pub const TOKEN_EMBEDDING: &str = "token_embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            latent_size: 8,
            channels: 64,
            embed_dim: 64,
            time_dim: 64,
            groups: 8,
        }
    }
}

const BLOCKS: usize = 2;

impl DenoiserConfig {
    /// Every parameter name with its shape, token embedding excluded.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, l, d, td) = (self.channels, self.latent_channels, self.embed_dim, self.time_dim);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("time.l1.weight".into(), vec![c, td]),
            ("time.l1.bias".into(), vec![c]),
            ("time.l2.weight".into(), vec![c, c]),
            ("time.l2.bias".into(), vec![c]),
            ("cond.weight".into(), vec![c, d]),
            ("cond.bias".into(), vec![c]),
            ("conv_in.weight".into(), vec![c, l, 3, 3]),
            ("conv_in.bias".into(), vec![c]),
        ];
        for i in 0..BLOCKS {
            let r = format!("res{i}");
            v.extend([
                (format!("{r}.norm1.weight"), vec![c]),
                (format!("{r}.norm1.bias"), vec![c]),
                (format!("{r}.conv1.weight"), vec![c, c, 3, 3]),
                (format!("{r}.conv1.bias"), vec![c]),
                (format!("{r}.time.weight"), vec![c, c]),
                (format!("{r}.time.bias"), vec![c]),
                (format!("{r}.norm2.weight"), vec![c]),
                (format!("{r}.norm2.bias"), vec![c]),
                (format!("{r}.conv2.weight"), vec![c, c, 3, 3]),
                (format!("{r}.conv2.bias"), vec![c]),
            ]);
            let a = format!("attn{i}");
            v.extend([
                (format!("{a}.norm.weight"), vec![c]),
                (format!("{a}.norm.bias"), vec![c]),
                (format!("{a}.q.weight"), vec![c, c]),
                (format!("{a}.k.weight"), vec![c, d]),
                (format!("{a}.v.weight"), vec![c, d]),
                (format!("{a}.o.weight"), vec![c, c]),
                (format!("{a}.o.bias"), vec![c]),
            ]);
        }
        v.extend([
            ("out.norm.weight".into(), vec![c]),
            ("out.norm.bias".into(), vec![c]),
            ("conv_out.weight".into(), vec![l, c, 3, 3]),
            ("conv_out.bias".into(), vec![l]),
            ("skip.weight".into(), vec![l, l, 1, 1]),
            ("skip.gate.weight".into(), vec![l, c]),
            ("skip.gate.bias".into(), vec![l]),
        ]);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Seeded initial parameters, including a `(vocab_size, d_e)` token table.
pub fn init_parameters(
    cfg: &DenoiserConfig,
    vocab_size: usize,
    seed: u64,
    dtype: DType,
) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, 0xDE70);
    let mut out = BTreeMap::new();
    for (name, shape) in cfg.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.starts_with("conv_out") || name.starts_with("skip") || name.ends_with(".bias") {
            vec![0.0; n]
        } else if name.contains("norm") {
            vec![1.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            rng::gaussian_vec_f32(&mut r, n, 1.0 / (fan_in as f64).sqrt())
        };
        out.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?);
    }
    let table = rng::gaussian_vec_f32(&mut r, vocab_size * cfg.embed_dim, 0.5);
    out.insert(
        TOKEN_EMBEDDING.into(),
        Tensor::from_vec(table, (vocab_size, cfg.embed_dim), &Device::Cpu)?.to_dtype(dtype)?,
    );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: BTreeMap<String, Tensor>,
    dtype: DType,
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.conv2d(w, 1, 1, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?)
}

fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
    Ok(normed
        .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks variable-length conditioning sequences into `(B, L_max, d)` and
/// an additive key mask `(B, 1, L_max)` when lengths differ.
pub fn pad_conditioning(seqs: &[Tensor]) -> Result<(Tensor, Option<Tensor>)> {
    let max_len = seqs.iter().map(|s| s.dims()[0]).max().unwrap_or(0);
    let uniform = seqs.iter().all(|s| s.dims()[0] == max_len);
    if uniform {
        return Ok((Tensor::stack(seqs, 0)?, None));
    }
    let dtype = seqs[0].dtype();
    let dim = seqs[0].dims()[1];
    let mut padded = Vec::with_capacity(seqs.len());
    let mut mask = Vec::with_capacity(seqs.len() * max_len);
    for s in seqs {
        let len = s.dims()[0];
        if len < max_len {
            let pad = Tensor::zeros((max_len - len, dim), dtype, &Device::Cpu)?;
            padded.push(Tensor::cat(&[s, &pad], 0)?);
        } else {
            padded.push(s.clone());
        }
        mask.extend((0..max_len).map(|i| if i < len { 0f32 } else { -1e9 }));
    }
    let mask = Tensor::from_vec(mask, (seqs.len(), 1, max_len), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((Tensor::stack(&padded, 0)?, Some(mask)))
}

/// Mean over the unmasked conditioning vectors, `(B, d)`.
fn pool_conditioning(cond: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(cond.mean(1)?),
        Some(m) => {
            let keep = m.ge(-1.0)?.to_dtype(cond.dtype())?;
            let count = keep.sum_keepdim(D::Minus1)?;
            Ok(keep.broadcast_div(&count)?.matmul(cond)?.squeeze(1)?)
        }
    }
}

impl Denoiser {
    /// Builds the network from named parameters. A token table entry, if
    /// present, is ignored.
    pub fn from_parameters(cfg: DenoiserConfig, params: &BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut own = BTreeMap::new();
        let mut dtype = None;
        for (name, shape) in cfg.parameter_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::shape(&shape, t.dims()));
            }
            dtype.get_or_insert(t.dtype());
            own.insert(name, t.clone());
        }
        Ok(Self {
            cfg,
            params: own,
            dtype: dtype.unwrap_or(DType::F32),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.elem_count()).sum()
    }

    pub fn checksum(&self) -> String {
        digest::tensors_sha256(self.params.values())
    }

    fn p(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn res_block(&self, i: usize, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let r = format!("res{i}");
        let g = self.cfg.groups;
        let h = group_norm(
            x,
            g,
            self.p(&format!("{r}.norm1.weight")),
            self.p(&format!("{r}.norm1.bias")),
        )?
        .silu()?;
        let h = conv3x3(
            &h,
            self.p(&format!("{r}.conv1.weight")),
            self.p(&format!("{r}.conv1.bias")),
        )?;
        let t = linear(
            temb,
            self.p(&format!("{r}.time.weight")),
            Some(self.p(&format!("{r}.time.bias"))),
        )?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = group_norm(
            &h,
            g,
            self.p(&format!("{r}.norm2.weight")),
            self.p(&format!("{r}.norm2.bias")),
        )?
        .silu()?;
        let h = conv3x3(
            &h,
            self.p(&format!("{r}.conv2.weight")),
            self.p(&format!("{r}.conv2.bias")),
        )?;
        Ok((x + h)?)
    }

    fn cross_attention(&self, i: usize, x: &Tensor, cond: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let a = format!("attn{i}");
        let (b, c, h, w) = x.dims4()?;
        let normed = group_norm(
            x,
            self.cfg.groups,
            self.p(&format!("{a}.norm.weight")),
            self.p(&format!("{a}.norm.bias")),
        )?;
        let tokens = normed.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = linear(&tokens, self.p(&format!("{a}.q.weight")), None)?;
        let k = linear(cond, self.p(&format!("{a}.k.weight")), None)?;
        let v = linear(cond, self.p(&format!("{a}.v.weight")), None)?;
        let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?;
        let out = linear(
            &out,
            self.p(&format!("{a}.o.weight")),
            Some(self.p(&format!("{a}.o.bias"))),
        )?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }

    /// Batched noise prediction.
    ///
    /// `z`: `(B, C, H, W)`, `ts`: one timestep per batch element,
    /// `cond`: `(B, L, d_e)`, `mask`: optional additive `(B, 1, L)` key mask.
    pub fn forward(&self, z: &Tensor, ts: &[usize], cond: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let cfg = &self.cfg;
        if (c, h, w) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size) {
            return Err(Error::shape(
                (cfg.latent_channels, cfg.latent_size, cfg.latent_size),
                (c, h, w),
            ));
        }
        if ts.len() != b {
            return Err(Error::shape(b, ts.len()));
        }
        let (cb, _, cd) = cond.dims3()?;
        if cb != b || cd != cfg.embed_dim {
            return Err(Error::shape((b, "L", cfg.embed_dim), cond.dims()));
        }
        let z = z.to_dtype(self.dtype)?;
        let cond = cond.to_dtype(self.dtype)?;
        let temb = timestep_embedding(ts, cfg.time_dim, self.dtype)?;
        let temb = linear(&temb, self.p("time.l1.weight"), Some(self.p("time.l1.bias")))?.silu()?;
        let pooled = pool_conditioning(&cond, mask)?;
        let temb = (temb + linear(&pooled, self.p("cond.weight"), Some(self.p("cond.bias")))?)?;
        let temb = linear(&temb, self.p("time.l2.weight"), Some(self.p("time.l2.bias")))?.silu()?;

        let mut x = conv3x3(&z, self.p("conv_in.weight"), self.p("conv_in.bias"))?;
        for i in 0..BLOCKS {
            x = self.res_block(i, &x, &temb)?;
            x = self.cross_attention(i, &x, &cond, mask)?;
        }
        let x = group_norm(&x, cfg.groups, self.p("out.norm.weight"), self.p("out.norm.bias"))?.silu()?;
        let out = conv3x3(&x, self.p("conv_out.weight"), self.p("conv_out.bias"))?;
        let gate = (linear(&temb, self.p("skip.gate.weight"), Some(self.p("skip.gate.bias")))? + 1.0)?;
        let skip = z
            .conv2d(self.p("skip.weight"), 0, 1, 1, 1)?
            .broadcast_mul(&gate.reshape((b, c, 1, 1))?)?;
        Ok((out + skip)?)
    }

    /// Single-latent prediction in `f64`.
    pub fn denoise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningSequence) -> Result<NoiseMap> {
        let z = z_t.tensor().unsqueeze(0)?;
        let c = cond.vectors().unsqueeze(0)?;
        let out = self.forward(&z, &[t], &c, None)?;
        NoiseMap::new(out.squeeze(0)?.to_dtype(DType::F64)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningSequence) -> Result<NoiseMap> {
        self.denoise(z_t, t, cond)
    }
}
