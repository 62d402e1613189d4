mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use textinv::conditioning::{euclidean, ConditioningSequence, ImageEncoder};
use textinv::corpus::{caption_words, generate_corpus, Family, PALETTES};
use textinv::denoiser::{Denoiser, TOKEN_EMBEDDING};
use textinv::diffusion::{reverse_chain, LatentCode, NoiseMap, StepNoise};
use textinv::pipeline;
use textinv::pretrain::pretrain_backbone;
use textinv::rng;

#[test]
fn smoke_pretraining_reduces_loss() {
    let cfg = common::smoke_config();
    let (_, losses) = pipeline::pretrain(&cfg).unwrap();
    assert_eq!(losses.len(), 200);
    let head = losses[..20].iter().sum::<f64>() / 20.0;
    let tail = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "running loss {head} -> {tail}");
}

#[test]
fn untrained_loss_is_near_one() {
    // Zero-initialized output means the loss is the mean of eps^2.
    let mut cfg = common::smoke_config();
    cfg.set("pretrain.steps", "1").unwrap();
    cfg.set("pretrain.batch", "64").unwrap();
    let (_, losses) = pipeline::pretrain(&cfg).unwrap();
    // 64 * 48 * 8 * 8 unit normals: std of the mean is about 0.0036.
    assert!((losses[0] - 1.0).abs() < 0.02, "initial loss {}", losses[0]);
}

#[test]
fn pretraining_is_deterministic() {
    let mut cfg = common::smoke_config();
    cfg.set("pretrain.steps", "20").unwrap();
    let (a, la) = pipeline::pretrain(&cfg).unwrap();
    let (b, lb) = pipeline::pretrain(&cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.denoiser.checksum(), b.denoiser.checksum());
    let ta = a.vocab.table().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let tb = b.vocab.table().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn pretraining_rejects_an_empty_corpus() {
    let cfg = common::smoke_config();
    let err = pretrain_backbone(
        &[],
        &cfg.schedule().unwrap(),
        &caption_words(),
        &pipeline::codec(&cfg).unwrap(),
        &ImageEncoder::new(cfg.encoder()).unwrap(),
        &cfg.denoiser().unwrap(),
        &cfg.pretrain(),
        DType::F32,
    );
    assert!(err.is_err());
}

fn loss_with(
    params: &BTreeMap<String, Tensor>,
    cfg: &textinv::denoiser::DenoiserConfig,
    z: &Tensor,
    ts: &[usize],
    cond: &Tensor,
    eps: &Tensor,
) -> Tensor {
    let d = Denoiser::from_parameters(cfg.clone(), params).unwrap();
    let pred = d.forward(z, ts, cond, None).unwrap();
    (pred - eps).unwrap().sqr().unwrap().mean_all().unwrap()
}

#[test]
fn backbone_gradients_match_finite_differences() {
    // Micro config: latent 12 x 2 x 2, d_e = 8.
    let cfg = common::micro_denoiser_config(12, 8);
    let (denoiser, _) = common::random_denoiser(&cfg, 4, 31, DType::F64);
    let mut r = rng::seeded(32);
    let z = Tensor::from_vec(rng::gaussian_vec(&mut r, 2 * 48), (2, 12, 2, 2), &Device::Cpu).unwrap();
    let eps = Tensor::from_vec(rng::gaussian_vec(&mut r, 2 * 48), (2, 12, 2, 2), &Device::Cpu).unwrap();
    let cond = Tensor::from_vec(rng::gaussian_vec(&mut r, 2 * 3 * 8), (2, 3, 8), &Device::Cpu).unwrap();
    let ts = [3usize, 17];

    let vars: BTreeMap<String, Var> = denoiser
        .parameters()
        .iter()
        .map(|(k, t)| (k.clone(), Var::from_tensor(t).unwrap()))
        .collect();
    let tracked: BTreeMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let grads = loss_with(&tracked, &cfg, &z, &ts, &cond, &eps).backward().unwrap();

    let mut worst: f64 = 0.0;
    for (name, var) in &vars {
        let x = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = grads.get(var.as_tensor()).expect("gradient for every parameter");
        let analytic = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = var.as_tensor().dims().to_vec();
        let err = common::max_relative_gradient_error(&x, &analytic, 1e-6, 1e-7, |p| {
            let mut params = denoiser.parameters().clone();
            params.insert(
                name.clone(),
                Tensor::from_vec(p.to_vec(), dims.as_slice(), &Device::Cpu).unwrap(),
            );
            loss_with(&params, &cfg, &z, &ts, &cond, &eps)
                .to_scalar::<f64>()
                .unwrap()
        });
        worst = worst.max(err);
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
    assert!(worst < 1e-3);
}

#[test]
fn trained_backbone_responds_to_conditioning() {
    let (model, _) = common::default_model();
    let z = LatentCode::new(NoiseMap::gaussian(model.codec.latent_shape(), &mut rng::seeded(5)).into_tensor()).unwrap();
    let a = ConditioningSequence::from_caption("a fine painting of stripes in ember", &model.vocab).unwrap();
    let b = ConditioningSequence::from_caption("a fine painting of dots in ocean", &model.vocab).unwrap();
    let pa = model.denoiser.denoise(&z, 40, &a).unwrap();
    let pb = model.denoiser.denoise(&z, 40, &b).unwrap();
    let diff = (pa.tensor() - pb.tensor())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!(diff > 0.0);
    let again = model.denoiser.denoise(&z, 40, &a).unwrap();
    assert_eq!(pa.to_vec(), again.to_vec());
}

#[test]
fn family_captions_steer_deterministic_samples() {
    // A sample for "a painting of A in P" should sit nearer the mean feature
    // of family-A corpus images in palette P than the family-B mean in P, in
    // at least 70% of (A, B) trials, four seeds per caption. Holding the
    // palette fixed keeps colour from dominating the comparison.
    let (model, cfg) = common::default_model();
    let corpus = generate_corpus(cfg.int("corpus.size"), cfg.u64("corpus.seed"), cfg.int("image.size")).unwrap();
    let mean_feature = |f: Family, p: &str| -> Option<Vec<f64>> {
        let feats: Vec<Vec<f64>> = corpus
            .iter()
            .filter(|e| e.spec.family == f && e.spec.palette.name == p)
            .map(|e| model.encoder.style_features(&e.image).unwrap())
            .collect();
        let n = feats.len() as f64;
        (!feats.is_empty()).then(|| {
            (0..feats[0].len())
                .map(|i| feats.iter().map(|v| v[i]).sum::<f64>() / n)
                .collect()
        })
    };
    let sampler = model.sampler();
    let (mut wins, mut trials) = (0, 0);
    for palette in PALETTES.iter().map(|p| p.name) {
        let means: Vec<Option<Vec<f64>>> = Family::ALL.iter().map(|f| mean_feature(*f, palette)).collect();
        for (a, fam) in Family::ALL.iter().enumerate() {
            let Some(own) = &means[a] else { continue };
            let caption = format!("a painting of {} in {palette}", fam.word());
            let cond = ConditioningSequence::from_caption(&caption, &model.vocab).unwrap();
            for seed in 0..4u64 {
                let noise =
                    NoiseMap::gaussian(model.codec.latent_shape(), &mut rng::seeded(100 + 10 * seed + a as u64));
                let z = LatentCode::new(noise.into_tensor()).unwrap();
                let chain = reverse_chain(
                    z,
                    model.sched.steps(),
                    &sampler,
                    &cond,
                    &model.sched,
                    StepNoise::Deterministic,
                )
                .unwrap();
                let f = model
                    .encoder
                    .style_features(&model.codec.decode(chain.last().unwrap()).unwrap())
                    .unwrap();
                for (b, other) in means.iter().enumerate() {
                    if let (true, Some(other)) = (b != a, other) {
                        trials += 1;
                        wins += (euclidean(&f, own) < euclidean(&f, other)) as usize;
                    }
                }
            }
        }
    }
    let rate = wins as f64 / trials as f64;
    println!("family steering: {wins}/{trials} = {rate:.3}");
    assert!(trials >= 200);
    assert!(rate >= 0.7, "family steering rate {rate}");
}

#[test]
fn checkpoint_restores_an_identical_model() {
    let cfg = {
        let mut c = common::smoke_config();
        c.set("pretrain.steps", "5").unwrap();
        c
    };
    let (model, _) = pipeline::pretrain(&cfg).unwrap();
    let ck = pipeline::to_checkpoint(&model, &cfg);
    assert!(ck.tensors.contains_key(TOKEN_EMBEDDING));
    let bytes = ck.to_bytes().unwrap();
    let back = textinv::persist::Checkpoint::from_bytes(&bytes).unwrap();
    let (restored, rcfg) = pipeline::from_checkpoint(&back).unwrap();
    assert_eq!(rcfg.hash(), cfg.hash());
    assert_eq!(restored.config_hash, model.config_hash);
    assert_eq!(restored.denoiser.checksum(), model.denoiser.checksum());
}
