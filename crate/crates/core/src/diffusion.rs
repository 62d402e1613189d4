//! Noise schedule, forward diffusion, reverse sampling steps and the
//! stochastic inversion that recovers per-step sampler noise from a latent
//! trajectory.
//!
//! Timesteps are 1-based: `t = 1..=T`. All latent algebra runs in `f64`.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::conditioning::ConditioningSequence;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

/// How the per-step sampler noise scale is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`
    Beta,
    /// `sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`
    Posterior,
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "posterior" => Ok(SigmaMode::Posterior),
            other => Err(Error::Config(format!("unknown sigma mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Beta => "beta",
            SigmaMode::Posterior => "posterior",
        })
    }
}

/// Tables of the fixed forward Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    mode: SigmaMode,
}

/// Linear schedule with `sigma_t^2 = beta_t`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end, SigmaMode::Beta)
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, mode)
    }

    pub fn from_betas(betas: Vec<f64>, mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta table".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = match mode {
            SigmaMode::Beta => betas.iter().map(|b| b.sqrt()).collect(),
            SigmaMode::Posterior => (0..betas.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
                })
                .collect(),
        };
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            mode,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn mode(&self) -> SigmaMode {
        self.mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Noise scale actually used by the sampler. The final step is noiseless.
    pub fn step_sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.sigma(t)
        }
    }
}

macro_rules! latent_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone)]
        pub struct $name(Tensor);

        impl $name {
            /// Wraps a rank-3 `(c, h, w)` tensor, converting to `f64`.
            pub fn new(data: Tensor) -> Result<Self> {
                if data.rank() != 3 {
                    return Err(Error::shape("(c, h, w)", data.dims()));
                }
                let data = data.to_dtype(DType::F64)?;
                let finite = data
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(Error::InvalidArgument(
                        concat!(stringify!($name), " contains non-finite values").into(),
                    ));
                }
                Ok(Self(data))
            }

            pub fn from_vec(data: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
                Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?)
            }

            pub fn zeros(shape: (usize, usize, usize)) -> Self {
                Self(Tensor::zeros(shape, DType::F64, &Device::Cpu).expect("cpu alloc"))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn shape(&self) -> (usize, usize, usize) {
                self.0.dims3().expect("rank checked at construction")
            }

            pub fn numel(&self) -> usize {
                self.0.elem_count()
            }

            pub fn to_vec(&self) -> Vec<f64> {
                self.0
                    .flatten_all()
                    .and_then(|t| t.to_vec1::<f64>())
                    .expect("f64 tensor")
            }
        }
    };
}

latent_newtype!(LatentCode);
latent_newtype!(NoiseMap);

impl NoiseMap {
    pub fn gaussian(shape: (usize, usize, usize), rng: &mut SeededRng) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let data = rng::gaussian_vec(rng, n);
        Self(Tensor::from_vec(data, shape, &Device::Cpu).expect("cpu alloc"))
    }
}

/// `||a - b|| / ||b||`, with a floor on the denominator.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = a.to_dtype(DType::F64)?;
    let b = b.to_dtype(DType::F64)?;
    let diff = (&a - &b)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
    let norm = b.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
    Ok(diff / norm.max(1e-12))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Anything that predicts the noise in `z_t` given a conditioning sequence.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &LatentCode, t: usize, cond: &ConditioningSequence) -> Result<NoiseMap>;
}

/// Closed-form marginal `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(z0: &LatentCode, t: usize, eps: &NoiseMap, sched: &NoiseSchedule) -> Result<LatentCode> {
    sched.check_t(t)?;
    same_shape(z0.tensor(), eps.tensor())?;
    let ab = sched.alpha_bar(t);
    let z = ((z0.tensor() * ab.sqrt())? + (eps.tensor() * (1.0 - ab).sqrt())?)?;
    Ok(LatentCode(z))
}

/// Mean of the reverse transition under the epsilon parameterization.
pub fn posterior_mean(z_t: &LatentCode, t: usize, eps_pred: &NoiseMap, sched: &NoiseSchedule) -> Result<LatentCode> {
    sched.check_t(t)?;
    same_shape(z_t.tensor(), eps_pred.tensor())?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mean = ((z_t.tensor() - (eps_pred.tensor() * coef)?)? / sched.alpha(t).sqrt())?;
    Ok(LatentCode(mean))
}

pub fn sample_stochastic_step(
    z_t: &LatentCode,
    t: usize,
    eps_pred: &NoiseMap,
    inject: &NoiseMap,
    sched: &NoiseSchedule,
) -> Result<LatentCode> {
    let mean = posterior_mean(z_t, t, eps_pred, sched)?;
    same_shape(mean.tensor(), inject.tensor())?;
    let sigma = sched.step_sigma(t);
    if sigma == 0.0 {
        return Ok(mean);
    }
    Ok(LatentCode((mean.tensor() + (inject.tensor() * sigma)?)?))
}

pub fn sample_deterministic_step(
    z_t: &LatentCode,
    t: usize,
    eps_pred: &NoiseMap,
    sched: &NoiseSchedule,
) -> Result<LatentCode> {
    posterior_mean(z_t, t, eps_pred, sched)
}

/// Recovers the noise that takes `z_t` to `z_prev` under the stochastic
/// sampler: `(z_prev - mu(z_t, t)) / sigma_t`.
pub fn stochastic_inversion(
    z_t: &LatentCode,
    z_prev: &LatentCode,
    t: usize,
    eps_pred: &NoiseMap,
    sched: &NoiseSchedule,
) -> Result<NoiseMap> {
    sched.check_t(t)?;
    let sigma = sched.step_sigma(t);
    if sigma == 0.0 {
        return Err(Error::DegenerateVariance(t));
    }
    let mean = posterior_mean(z_t, t, eps_pred, sched)?;
    same_shape(z_prev.tensor(), mean.tensor())?;
    Ok(NoiseMap(((z_prev.tensor() - mean.tensor())? / sigma)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseOrigin {
    Seeded(u64),
    InvertedFromImage { seed: u64 },
}

/// Per-timestep noise maps, stored for `t = T..=1`.
#[derive(Debug, Clone)]
pub struct NoiseMapSequence {
    maps: Vec<NoiseMap>,
    origin: NoiseOrigin,
}

impl NoiseMapSequence {
    /// `maps[0]` belongs to `t = T`, the last entry to `t = 1`.
    pub fn new(maps: Vec<NoiseMap>, origin: NoiseOrigin) -> Result<Self> {
        if let Some(first) = maps.first() {
            let shape = first.shape();
            if let Some(bad) = maps.iter().find(|m| m.shape() != shape) {
                return Err(Error::shape(shape, bad.shape()));
            }
        }
        Ok(Self { maps, origin })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn origin(&self) -> NoiseOrigin {
        self.origin
    }

    pub fn get(&self, t: usize) -> Option<&NoiseMap> {
        if t == 0 || t > self.maps.len() {
            None
        } else {
            self.maps.get(self.maps.len() - t)
        }
    }

    pub fn maps(&self) -> &[NoiseMap] {
        &self.maps
    }
}

/// The seeded forward-noise draw used to build the noisy chain at step `t`.
pub fn chain_noise(seed: u64, t: usize, shape: (usize, usize, usize)) -> NoiseMap {
    NoiseMap::gaussian(shape, &mut rng::stream(seed, t as u64))
}

/// `z_t` of the seeded noisy chain built from `z0`.
pub fn chain_latent(z0: &LatentCode, t: usize, seed: u64, sched: &NoiseSchedule) -> Result<LatentCode> {
    forward_diffuse(z0, t, &chain_noise(seed, t, z0.shape()), sched)
}

/// Builds the noisy chain `z_T..z_1` from `z0` with seeded draws, then
/// recovers the sampler noise of every stochastic step `t = T..=2`.
/// The `t = 1` entry is all zeros since the final step is noiseless.
pub fn invert_trajectory(
    z0: &LatentCode,
    sched: &NoiseSchedule,
    denoiser: &dyn NoisePredictor,
    cond: &ConditioningSequence,
    seed: u64,
) -> Result<NoiseMapSequence> {
    let steps = sched.steps();
    let chain = (1..=steps)
        .map(|t| chain_latent(z0, t, seed, sched))
        .collect::<Result<Vec<_>>>()?;
    let mut maps = Vec::with_capacity(steps);
    for t in (2..=steps).rev() {
        let z_t = &chain[t - 1];
        let eps_pred = denoiser.predict_noise(z_t, t, cond)?;
        maps.push(stochastic_inversion(z_t, &chain[t - 2], t, &eps_pred, sched)?);
    }
    maps.push(NoiseMap::zeros(z0.shape()));
    NoiseMapSequence::new(maps, NoiseOrigin::InvertedFromImage { seed })
}

/// Noise injected at each stochastic step of a reverse chain.
pub enum StepNoise<'a> {
    /// Posterior mean only.
    Deterministic,
    /// Fresh Gaussian draws from the given stream.
    Fresh(&'a mut SeededRng),
    /// Replays a recovered noise-map sequence.
    Inverted(&'a NoiseMapSequence),
}

/// Runs the reverse chain from `z_start` at `t_start` down to `z_0`.
/// Returns every visited latent, `[z_{t_start}, ..., z_0]`.
pub fn reverse_chain(
    z_start: LatentCode,
    t_start: usize,
    denoiser: &dyn NoisePredictor,
    cond: &ConditioningSequence,
    sched: &NoiseSchedule,
    mut noise: StepNoise<'_>,
) -> Result<Vec<LatentCode>> {
    if t_start > 0 {
        sched.check_t(t_start)?;
    }
    let shape = z_start.shape();
    let mut out = Vec::with_capacity(t_start + 1);
    out.push(z_start);
    for t in (1..=t_start).rev() {
        let z_t = out.last().expect("non-empty");
        let eps_pred = denoiser.predict_noise(z_t, t, cond)?;
        let next = match &mut noise {
            StepNoise::Deterministic => sample_deterministic_step(z_t, t, &eps_pred, sched)?,
            StepNoise::Fresh(rng) => {
                if t >= 2 {
                    let inject = NoiseMap::gaussian(shape, rng);
                    sample_stochastic_step(z_t, t, &eps_pred, &inject, sched)?
                } else {
                    sample_deterministic_step(z_t, t, &eps_pred, sched)?
                }
            }
            StepNoise::Inverted(maps) => {
                let inject = maps.get(t).ok_or(Error::TimestepOutOfRange { t, steps: maps.len() })?;
                sample_stochastic_step(z_t, t, &eps_pred, inject, sched)?
            }
        };
        out.push(next);
    }
    Ok(out)
}
