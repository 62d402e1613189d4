#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};

use textinv::conditioning::{assemble_conditioning, tokenize, ImageEmbedding, Vocabulary};
use textinv::config::RunConfig;
use textinv::corpus::{held_out_styles, reference_image, Scale, Style};
use textinv::denoiser::{init_parameters, Denoiser, DenoiserConfig, TOKEN_EMBEDDING};
use textinv::diffusion::{LatentCode, NoiseMap, NoiseSchedule, SigmaMode};
use textinv::inversion::{ldm_loss, InversionConfig, InversionModule, Mode};
use textinv::persist::Checkpoint;
use textinv::pipeline;
use textinv::rng;
use textinv::synthesis::FrozenModel;

/// Render seed of the held-out references used by the evaluation tests.
pub const REFERENCE_SEED: u64 = 3;

/// Default-config backbone, pretrained once and cached on disk across test
/// binaries.
pub fn default_model() -> &'static (FrozenModel, RunConfig) {
    static MODEL: OnceLock<(FrozenModel, RunConfig)> = OnceLock::new();
    MODEL.get_or_init(|| cached_model(RunConfig::default()))
}

pub fn cached_model(cfg: RunConfig) -> (FrozenModel, RunConfig) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join(format!("backbone-{}.ckpt", cfg.hash()));
    if let Ok(ck) = Checkpoint::load(&path) {
        if let Ok(m) = pipeline::from_checkpoint(&ck) {
            return m;
        }
    }
    let (model, _) = pipeline::pretrain(&cfg).expect("pretraining");
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    pipeline::to_checkpoint(&model, &cfg)
        .save(&tmp)
        .expect("save checkpoint");
    std::fs::rename(&tmp, &path).expect("publish checkpoint");
    (model, cfg)
}

pub const SMOKE_OVERRIDES: [&str; 9] = [
    "corpus.size=32",
    "pretrain.steps=200",
    "pretrain.batch=8",
    "backbone.channels=16",
    "backbone.time_dim=16",
    "backbone.groups=4",
    "encoder.embed_dim=16",
    "encoder.hidden=32",
    "inversion.steps=50",
];

/// A small config that pretrains in seconds.
pub fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for o in SMOKE_OVERRIDES {
        cfg.apply_override(o).unwrap();
    }
    cfg
}

pub fn held_out_references(size: usize) -> Vec<(Style, textinv::codec::PixelImage)> {
    held_out_styles()
        .into_iter()
        .map(|s| {
            let img = reference_image(&s, Scale::Fine, size, REFERENCE_SEED).unwrap();
            (s, img)
        })
        .collect()
}

/// Micro denoiser with every parameter random, so gradients reach all inputs.
pub fn random_denoiser(cfg: &DenoiserConfig, vocab: usize, seed: u64, dtype: DType) -> (Denoiser, Tensor) {
    let mut r = rng::seeded(seed);
    let params: BTreeMap<String, Tensor> = init_parameters(cfg, vocab, seed, DType::F64)
        .unwrap()
        .into_iter()
        .map(|(k, t)| {
            let n = t.elem_count();
            let noise = Tensor::from_vec(rng::gaussian_vec(&mut r, n), t.dims(), &Device::Cpu).unwrap();
            let t = (t + (noise * 0.3).unwrap()).unwrap().to_dtype(dtype).unwrap();
            (k, t)
        })
        .collect();
    let table = params[TOKEN_EMBEDDING].clone();
    (Denoiser::from_parameters(cfg.clone(), &params).unwrap(), table)
}

pub fn micro_denoiser_config(latent_channels: usize, embed_dim: usize) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels,
        latent_size: 2,
        channels: 8,
        embed_dim,
        time_dim: 8,
        groups: 2,
    }
}

/// Central finite differences of `f` at `x`, compared with `analytic`.
/// Returns the largest relative error, with a floor on the denominator.
pub fn max_relative_gradient_error(x: &[f64], analytic: &[f64], h: f64, floor: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = numeric.abs().max(analytic[i].abs()).max(floor);
        worst = worst.max((numeric - analytic[i]).abs() / denom);
    }
    worst
}

/// Largest relative error between analytic and central-difference
/// gradients of the summed `ldm_loss` at two timesteps, taken w.r.t. every
/// inversion-module parameter. Micro config: d_e = 8, two attention layers,
/// latent 4 x 2 x 2, train mode with a fixed dropout stream.
pub fn inversion_gradient_error() -> f64 {
    let dcfg = micro_denoiser_config(4, 8);
    let (denoiser, table) = random_denoiser(&dcfg, 3, 11, DType::F64);
    let vocab = Vocabulary::new(vec!["a".into(), "painting".into(), "of".into()], table).unwrap();
    let sched = NoiseSchedule::linear(64, 1e-3, 0.2, SigmaMode::Beta).unwrap();
    let ids = tokenize("a painting of [C]", &vocab).unwrap();
    let module_cfg = InversionConfig {
        layers: 2,
        dropout: 0.05,
        init_noise: 0.3,
        ..Default::default()
    };
    let module = InversionModule::new(8, &module_cfg, DType::F64).unwrap();
    let mut r = rng::seeded(12);
    let mut gaussian = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(rng::gaussian_vec(&mut r, n), shape, &Device::Cpu).unwrap()
    };
    let img = ImageEmbedding::new(gaussian(&[4, 8])).unwrap();
    let z0 = LatentCode::new(gaussian(&[4, 2, 2])).unwrap();
    let eps = [
        NoiseMap::new(gaussian(&[4, 2, 2])).unwrap(),
        NoiseMap::new(gaussian(&[4, 2, 2])).unwrap(),
    ];
    let ts = [5usize, 40];

    let loss = || -> Tensor {
        let mut drop = rng::seeded(16);
        let v = module.forward(&img, Mode::Train, Some(&mut drop)).unwrap();
        let cond = assemble_conditioning(&ids, &v, &vocab).unwrap();
        let a = ldm_loss(&z0, &cond, ts[0], &eps[0], &denoiser, &sched).unwrap();
        let b = ldm_loss(&z0, &cond, ts[1], &eps[1], &denoiser, &sched).unwrap();
        (a + b).unwrap()
    };
    let grads = loss().backward().unwrap();
    let vars = module.vars();
    assert_eq!(vars.len(), 2 * 3 + 2);
    let mut worst: f64 = 0.0;
    for var in &vars {
        let base = var.as_tensor().copy().unwrap();
        let dims = base.dims().to_vec();
        let x = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .expect("gradient")
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let err = max_relative_gradient_error(&x, &analytic, 1e-6, 1e-7, |p| {
            var.set(&Tensor::from_vec(p.to_vec(), dims.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            loss().to_scalar::<f64>().unwrap()
        });
        var.set(&base).unwrap();
        worst = worst.max(err);
    }
    worst
}
