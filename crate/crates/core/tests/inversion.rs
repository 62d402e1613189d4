mod common;

use candle_core::{DType, Device, Tensor};

use textinv::conditioning::{ConditioningSequence, Vocabulary};
use textinv::denoiser::{init_parameters, Denoiser};
use textinv::diffusion::{LatentCode, NoiseMap, NoiseSchedule, SigmaMode};
use textinv::digest;
use textinv::inversion::{direct_optimize, ldm_loss, train_inversion, ProbeSet};
use textinv::rng;

const WORDS: [&str; 3] = ["a", "painting", "of"];

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(64, 1e-3, 0.2, SigmaMode::Beta).unwrap()
}

fn micro_vocab(table: Tensor) -> Vocabulary {
    Vocabulary::new(WORDS.iter().map(|w| w.to_string()).collect(), table).unwrap()
}

fn gaussian(seed: u64, shape: (usize, usize, usize)) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_vec(
        rng::gaussian_vec(&mut r, shape.0 * shape.1 * shape.2),
        shape,
        &Device::Cpu,
    )
    .unwrap()
}

#[test]
fn zero_output_and_unit_noise_give_one_over_n() {
    let cfg = common::micro_denoiser_config(4, 8);
    let params = init_parameters(&cfg, 3, 1, DType::F64).unwrap();
    let denoiser = Denoiser::from_parameters(cfg, &params).unwrap();
    let vocab = micro_vocab(params[textinv::denoiser::TOKEN_EMBEDDING].clone());
    let cond = ConditioningSequence::from_caption("a painting", &vocab).unwrap();
    let z0 = LatentCode::new(gaussian(2, (4, 2, 2))).unwrap();
    let mut e = vec![0.0; 16];
    e[5] = 1.0;
    let eps = NoiseMap::from_vec(e, (4, 2, 2)).unwrap();
    let loss = ldm_loss(&z0, &cond, 10, &eps, &denoiser, &schedule())
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((loss - 1.0 / 16.0).abs() < 1e-12, "{loss}");
}

#[test]
fn ldm_loss_matches_an_elementwise_sum() {
    let cfg = common::micro_denoiser_config(4, 8);
    let (denoiser, table) = common::random_denoiser(&cfg, 3, 7, DType::F64);
    let vocab = micro_vocab(table);
    let cond = ConditioningSequence::from_caption("a painting of", &vocab).unwrap();
    let sched = schedule();
    let z0v = gaussian(8, (4, 2, 2)).flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let ev = gaussian(9, (4, 2, 2)).flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for t in [1, 17, 64] {
        let loss = ldm_loss(
            &LatentCode::from_vec(z0v.clone(), (4, 2, 2)).unwrap(),
            &cond,
            t,
            &NoiseMap::from_vec(ev.clone(), (4, 2, 2)).unwrap(),
            &denoiser,
            &sched,
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        let ab = sched.alpha_bars()[t - 1];
        let zt: Vec<f64> = z0v
            .iter()
            .zip(&ev)
            .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
            .collect();
        let zt = Tensor::from_vec(zt, (1, 4, 2, 2), &Device::Cpu).unwrap();
        let pred = denoiser
            .forward(&zt, &[t], &cond.vectors().unsqueeze(0).unwrap(), None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let mut sum = 0.0;
        for i in 0..16 {
            sum += (ev[i] - pred[i]) * (ev[i] - pred[i]);
        }
        let expected = sum / 16.0;
        assert!(
            (loss - expected).abs() <= 1e-12 * expected.max(1.0),
            "t={t}: {loss} vs {expected}"
        );
    }
}

#[test]
fn inversion_module_gradients_match_finite_differences() {
    let err = common::inversion_gradient_error();
    assert!(err < 1e-3, "relative error {err}");
}

fn smoke() -> &'static (textinv::synthesis::FrozenModel, textinv::config::RunConfig) {
    static MODEL: std::sync::OnceLock<(textinv::synthesis::FrozenModel, textinv::config::RunConfig)> =
        std::sync::OnceLock::new();
    MODEL.get_or_init(|| common::cached_model(common::smoke_config()))
}

fn reference() -> textinv::codec::PixelImage {
    let (model, _) = smoke();
    let (h, _) = model.codec.image_dims();
    common::held_out_references(h).remove(0).1
}

#[test]
fn training_leaves_frozen_models_untouched() {
    let (model, cfg) = smoke();
    let before = (
        model.denoiser.checksum(),
        model.encoder.checksum(),
        digest::tensors_sha256([model.vocab.table()]),
    );
    let mut train = cfg.inversion_training();
    train.steps = 30;
    train_inversion(&reference(), &model.context(), &cfg.inversion_module(), &train).unwrap();
    direct_optimize(&reference(), &model.context(), &train).unwrap();
    let after = (
        model.denoiser.checksum(),
        model.encoder.checksum(),
        digest::tensors_sha256([model.vocab.table()]),
    );
    assert_eq!(before, after);
}

#[test]
fn attention_training_reduces_smoothed_loss() {
    let (model, cfg) = smoke();
    let mut train = cfg.inversion_training();
    train.steps = 500;
    train.eval_every = 0;
    let out = train_inversion(&reference(), &model.context(), &cfg.inversion_module(), &train).unwrap();
    assert_eq!(out.run.losses.len(), 500);
    let early = out.run.smoothed_loss(10, 10);
    let late = out.run.smoothed_loss(500, 100);
    assert!(late < early, "smoothed loss {early} -> {late}");
}

#[test]
fn direct_optimization_reduces_probe_loss() {
    let (model, cfg) = smoke();
    let mut train = cfg.inversion_training();
    train.steps = 300;
    train.eval_every = 50;
    let run = direct_optimize(&reference(), &model.context(), &train).unwrap();
    let first = run.evals.first().unwrap().loss;
    let best = run.best_eval().unwrap();
    assert!(best < first, "probe loss {first} -> {best}");
    let steps: Vec<usize> = run.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![0, 50, 100, 150, 200, 250, 300]);
}

#[test]
fn direct_run_starts_at_the_word_conditioning() {
    let (model, cfg) = smoke();
    let mut train = cfg.inversion_training();
    train.steps = 1;
    let run = direct_optimize(&reference(), &model.context(), &train).unwrap();
    let caption = train.template.replace("[C]", &train.direct_init_word);
    let cond = ConditioningSequence::from_caption(&caption, &model.vocab).unwrap();
    let z0 = model.codec.encode(&reference()).unwrap();
    let probe = ProbeSet::new(train.probe_size, train.probe_seed, z0.shape(), &model.sched).unwrap();
    let expected = probe.loss(&z0, &cond, &model.denoiser, &model.sched).unwrap();
    assert_eq!(run.evals[0].step, 0);
    assert!(
        (run.evals[0].loss - expected).abs() <= 1e-9 * expected,
        "{} vs {expected}",
        run.evals[0].loss
    );
}

#[test]
fn same_seed_gives_the_same_embedding() {
    let (model, cfg) = smoke();
    let mut train = cfg.inversion_training();
    train.steps = 20;
    let a = train_inversion(&reference(), &model.context(), &cfg.inversion_module(), &train).unwrap();
    let b = train_inversion(&reference(), &model.context(), &cfg.inversion_module(), &train).unwrap();
    assert_eq!(
        a.run.embedding.to_f32_vec().unwrap(),
        b.run.embedding.to_f32_vec().unwrap()
    );
    assert_eq!(a.run.losses, b.run.losses);
    train.seed += 1;
    let c = train_inversion(&reference(), &model.context(), &cfg.inversion_module(), &train).unwrap();
    assert_ne!(a.run.losses, c.run.losses);
}

#[test]
fn logged_learning_rate_follows_the_scaling_rule() {
    let (model, cfg) = smoke();
    let mut train = cfg.inversion_training();
    train.steps = 2;
    train.eval_every = 0;
    train.device_count = 2;
    train.batch_size = 3;
    let run = direct_optimize(&reference(), &model.context(), &train).unwrap();
    assert!((run.effective_lr - train.base_lr * 6.0).abs() < 1e-15);
    train.lr_override = Some(0.04);
    let run = direct_optimize(&reference(), &model.context(), &train).unwrap();
    assert_eq!(run.effective_lr, 0.04);
}
