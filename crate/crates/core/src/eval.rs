//! Evaluation protocols: the convergence benchmark, nearest-reference
//! accuracy, template editability, and run-directory verification.
//!
//! Accuracy and editability are operationalised with the frozen image
//! encoder's style features (per-dimension token mean and std).

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::codec::PixelImage;
use crate::conditioning::{euclidean, PseudoWordEmbedding};
use crate::error::{Error, Result};
use crate::inversion::{direct_optimize, train_inversion, InversionConfig, InversionTrainConfig, TrainingRun};
use crate::persist::{self, Checkpoint, MetricsRow};
use crate::rng;
use crate::synthesis::{style_transfer, txt2img, FrozenModel, GenerationRequest, SampleMode, StyleRecord};

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// How the convergence threshold is derived from the reference run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// `factor x best`.
    Relative(f64),
    /// `best + fraction x (start - best)`, with `start` the reference run's
    /// step-0 probe loss.
    Gap(f64),
}

impl ThresholdRule {
    pub fn threshold(self, start: f64, best: f64) -> f64 {
        match self {
            ThresholdRule::Relative(f) => f * best,
            ThresholdRule::Gap(f) => best + f * (start - best),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    /// Length of the direct-optimization run that sets the threshold.
    pub reference_steps: usize,
    /// Step cap for each timed run.
    pub max_steps: usize,
    pub rule: ThresholdRule,
    pub train: InversionTrainConfig,
    pub module: InversionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub attention_steps: Option<usize>,
    pub direct_steps: Option<usize>,
}

impl SeedResult {
    /// Direct steps over attention steps; above 1 means the attention
    /// module converged faster. A direct run that never reached the
    /// threshold counts as `max_steps`, which can only lower the ratio; an
    /// attention run that never reached it scores 0. Steps are floored at 1.
    pub fn ratio(&self, max_steps: usize) -> f64 {
        match self.attention_steps {
            None => 0.0,
            Some(a) => self.direct_steps.unwrap_or(max_steps).max(1) as f64 / a.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub reference_start: f64,
    pub reference_best: f64,
    pub threshold: f64,
    pub max_steps: usize,
    pub seeds: Vec<SeedResult>,
    /// Per-step training loss of every timed run.
    pub rows: Vec<MetricsRow>,
    /// Probe loss at every evaluation point of every timed run.
    pub probe_rows: Vec<MetricsRow>,
}

impl BenchReport {
    pub fn median_ratio(&self) -> Option<f64> {
        median(self.seeds.iter().map(|s| s.ratio(self.max_steps)).collect())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "reference probe loss {:.6} at start, best {:.6}, threshold {:.6}\n",
            self.reference_start, self.reference_best, self.threshold
        );
        for r in &self.seeds {
            s += &format!(
                "seed {}: attention {:?} direct {:?} ratio {:.3}\n",
                r.seed,
                r.attention_steps,
                r.direct_steps,
                r.ratio(self.max_steps)
            );
        }
        if let Some(m) = self.median_ratio() {
            s += &format!("median steps ratio (direct/attention) {m:.3}\n");
        }
        s
    }
}

fn rows_of(run: &TrainingRun, id: &str) -> (Vec<MetricsRow>, Vec<MetricsRow>) {
    let variant = run.variant.as_str().to_string();
    let steps = run
        .losses
        .iter()
        .zip(&run.step_times)
        .enumerate()
        .map(|(i, (l, w))| MetricsRow {
            run_id: id.to_string(),
            variant: variant.clone(),
            step: i + 1,
            loss: *l,
            wall_time_s: *w,
        })
        .collect();
    let probes = run
        .evals
        .iter()
        .map(|e| MetricsRow {
            run_id: id.to_string(),
            variant: variant.clone(),
            step: e.step,
            loss: e.loss,
            wall_time_s: e.wall_time_s,
        })
        .collect();
    (steps, probes)
}

/// Times attention-based inversion against direct optimization on `y`.
/// Both variants share seeds, timestep/noise streams and the probe set.
pub fn run_convergence_benchmark(y: &PixelImage, model: &FrozenModel, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one seed".into()));
    }
    if cfg.train.eval_every == 0 {
        return Err(Error::InvalidArgument("benchmark needs probe evaluation".into()));
    }
    let ctx = model.context();
    let reference = direct_optimize(
        y,
        &ctx,
        &InversionTrainConfig {
            steps: cfg.reference_steps,
            stop_below: None,
            ..cfg.train.clone()
        },
    )?;
    let reference_best = reference.best_eval().expect("evaluation enabled");
    let reference_start = reference.evals[0].loss;
    let threshold = cfg.rule.threshold(reference_start, reference_best);
    let mut seeds = Vec::new();
    let mut rows = Vec::new();
    let mut probe_rows = Vec::new();
    for &seed in &cfg.seeds {
        let train = InversionTrainConfig {
            steps: cfg.max_steps,
            seed,
            stop_below: Some(threshold),
            ..cfg.train.clone()
        };
        let module = InversionConfig {
            seed: cfg.module.seed.wrapping_add(seed),
            ..cfg.module.clone()
        };
        let att = train_inversion(y, &ctx, &module, &train)?.run;
        let dir = direct_optimize(y, &ctx, &train)?;
        let id = persist::run_id(&model.config_hash, seed);
        for run in [&att, &dir] {
            let (s, p) = rows_of(run, &id);
            rows.extend(s);
            probe_rows.extend(p);
        }
        seeds.push(SeedResult {
            seed,
            attention_steps: att.reached_at,
            direct_steps: dir.reached_at,
        });
    }
    Ok(BenchReport {
        reference_start,
        reference_best,
        threshold,
        max_steps: cfg.max_steps,
        seeds,
        rows,
        probe_rows,
    })
}

/// Random pseudo-words with the token table's per-entry scale.
pub fn random_styles(model: &FrozenModel, n: usize, seed: u64) -> Result<Vec<StyleRecord>> {
    let table = model
        .vocab
        .table()
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    let std = (table.iter().map(|v| v * v).sum::<f64>() / table.len() as f64).sqrt();
    let d = model.vocab.embed_dim();
    let mut r = rng::stream(seed, 0xC047);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = rng::gaussian_vec(&mut r, d).into_iter().map(|x| x * std).collect();
            Ok(StyleRecord {
                embedding: PseudoWordEmbedding::new(Tensor::from_vec(v, (1, d), &Device::Cpu)?)?,
                template: "a painting of [C]".into(),
                config_hash: model.config_hash.clone(),
                seed,
                steps: 0,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum AccuracyGeneration {
    /// Image-to-image transfer of each content image at `strength`.
    Transfer {
        contents: Vec<PixelImage>,
        strength: f64,
    },
    Txt2Img {
        mode: SampleMode,
    },
}

#[derive(Debug, Clone)]
pub struct AccuracyConfig {
    pub samples: usize,
    pub seed: u64,
    pub template: String,
    pub generation: AccuracyGeneration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub style_id: String,
    /// Mean feature distance of the samples to the style's own reference.
    pub own_distance: f64,
    /// Smallest mean distance to any other reference.
    pub min_other_distance: f64,
    pub correct: bool,
    /// Samples whose nearest reference is their own.
    pub nearest_own: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyReport {
    /// Fraction of samples whose nearest reference is their own.
    pub fn sample_accuracy(&self) -> f64 {
        let hit: usize = self.rows.iter().map(|r| r.nearest_own).sum();
        let n: usize = self.rows.iter().map(|r| r.samples).sum();
        hit as f64 / n.max(1) as f64
    }

    /// Fraction of styles whose mean sample distance is smallest to their
    /// own reference.
    pub fn style_accuracy(&self) -> f64 {
        self.rows.iter().filter(|r| r.correct).count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("style_id,own_distance,min_other_distance,correct,nearest_own,samples\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.style_id, r.own_distance, r.min_other_distance, r.correct, r.nearest_own, r.samples
            );
        }
        s
    }
}

fn generate_samples(style: &StyleRecord, model: &FrozenModel, cfg: &AccuracyConfig) -> Result<Vec<PixelImage>> {
    (0..cfg.samples)
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k as u64);
            match &cfg.generation {
                AccuracyGeneration::Txt2Img { mode } => txt2img(
                    &GenerationRequest::txt2img(style.clone(), &cfg.template, seed, *mode),
                    model,
                ),
                AccuracyGeneration::Transfer { contents, strength } => {
                    if contents.is_empty() {
                        return Err(Error::InvalidArgument("transfer accuracy needs content images".into()));
                    }
                    let content = contents[k % contents.len()].clone();
                    style_transfer(
                        &GenerationRequest::transfer(style.clone(), &cfg.template, seed, content, *strength),
                        model,
                    )
                }
            }
        })
        .collect()
}

/// Generates `samples` images per style and scores them against every
/// reference by feature distance.
pub fn eval_accuracy(
    ids: &[String],
    styles: &[StyleRecord],
    references: &[PixelImage],
    model: &FrozenModel,
    cfg: &AccuracyConfig,
) -> Result<AccuracyReport> {
    if styles.len() != references.len() || ids.len() != styles.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} styles and {} references must match",
            ids.len(),
            styles.len(),
            references.len()
        )));
    }
    if styles.len() < 2 || cfg.samples == 0 {
        return Err(Error::InvalidArgument("need at least two styles and one sample".into()));
    }
    let ref_feats = references
        .iter()
        .map(|r| model.encoder.style_features(r))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, style) in styles.iter().enumerate() {
        let mut sums = vec![0.0; references.len()];
        let mut nearest_own = 0;
        let samples = generate_samples(style, model, cfg)?;
        for img in &samples {
            let f = model.encoder.style_features(img)?;
            let d: Vec<f64> = ref_feats.iter().map(|r| euclidean(&f, r)).collect();
            let best = (0..d.len()).min_by(|a, b| d[*a].total_cmp(&d[*b])).expect("non-empty");
            nearest_own += (best == i) as usize;
            for (s, v) in sums.iter_mut().zip(&d) {
                *s += v;
            }
        }
        let n = samples.len() as f64;
        let own = sums[i] / n;
        let min_other = sums
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| s / n)
            .fold(f64::INFINITY, f64::min);
        rows.push(AccuracyRow {
            style_id: ids[i].clone(),
            own_distance: own,
            min_other_distance: min_other,
            correct: own < min_other,
            nearest_own,
            samples: samples.len(),
        });
    }
    Ok(AccuracyReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub a: usize,
    pub b: usize,
    pub pixel_distance: f64,
    pub feature_distance: f64,
}

#[derive(Debug, Clone)]
pub struct EditabilityReport {
    pub templates: Vec<String>,
    pub pairs: Vec<PairRow>,
    /// Feature distance of each template's output to the reference.
    pub reference_distance: Vec<f64>,
    pub images: Vec<PixelImage>,
}

impl EditabilityReport {
    pub fn all_pairs_distinct(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.pixel_distance > 0.0 && p.feature_distance > 0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,template_a,template_b,pixel_distance,feature_distance\n");
        for p in &self.pairs {
            s += &format!(
                "pair,{},{},{},{}\n",
                self.templates[p.a], self.templates[p.b], p.pixel_distance, p.feature_distance
            );
        }
        for (t, d) in self.templates.iter().zip(&self.reference_distance) {
            s += &format!("reference,{t},,,{d}\n");
        }
        s
    }
}

/// Renders every template with the same seed and style and compares the
/// outputs pairwise and against the reference.
pub fn eval_editability(
    style: &StyleRecord,
    reference: &PixelImage,
    templates: &[String],
    model: &FrozenModel,
    seed: u64,
    mode: SampleMode,
) -> Result<EditabilityReport> {
    for t in templates {
        if t.matches(crate::conditioning::PLACEHOLDER).count() != 1 {
            return Err(Error::Placeholder(t.matches(crate::conditioning::PLACEHOLDER).count()));
        }
    }
    let ref_feat = model.encoder.style_features(reference)?;
    let mut images = Vec::with_capacity(templates.len());
    let mut feats = Vec::with_capacity(templates.len());
    for t in templates {
        let img = txt2img(&GenerationRequest::txt2img(style.clone(), t, seed, mode), model)?;
        feats.push(model.encoder.style_features(&img)?);
        images.push(img);
    }
    let mut pairs = Vec::new();
    for a in 0..templates.len() {
        for b in a + 1..templates.len() {
            pairs.push(PairRow {
                a,
                b,
                pixel_distance: images[a].mean_abs_diff(&images[b])?,
                feature_distance: euclidean(&feats[a], &feats[b]),
            });
        }
    }
    Ok(EditabilityReport {
        templates: templates.to_vec(),
        pairs,
        reference_distance: feats.iter().map(|f| euclidean(f, &ref_feat)).collect(),
        images,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactCheck {
    pub path: PathBuf,
    pub found: Option<String>,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub expected: String,
    pub artifacts: Vec<ArtifactCheck>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        !self.artifacts.is_empty() && self.artifacts.iter().all(|a| a.ok)
    }
}

fn artifact_hash(path: &Path) -> Result<Option<Option<String>>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    Ok(match ext {
        "ckpt" => Some(Some(Checkpoint::load(path)?.config_hash)),
        "style" => Some(Some(persist::style_from_bytes(&fs::read(path)?)?.config_hash)),
        "png" => Some(persist::load_png(path)?.1),
        "csv" => {
            let text = fs::read_to_string(path)?;
            if text.starts_with(persist::CSV_HEADER) {
                let hashes: Vec<String> = persist::read_metrics(path)?
                    .iter()
                    .map(|r| {
                        r.run_id
                            .rsplit_once("-s")
                            .map(|(h, _)| h.to_string())
                            .unwrap_or_default()
                    })
                    .collect();
                match hashes.first() {
                    Some(h) if hashes.iter().all(|x| x == h) => Some(Some(h.clone())),
                    Some(_) => Some(Some("mixed".into())),
                    None => Some(None),
                }
            } else {
                None
            }
        }
        _ => None,
    })
}

/// Checks that every checkpoint, style record, PNG and metrics CSV in `dir`
/// embeds the run's config hash. The expected hash is taken from
/// `run.cfg` when present, otherwise from the first checkpoint found.
pub fn verify_run(dir: &Path) -> Result<VerifyReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| Ok(e?.path())).collect::<Result<Vec<_>>>()?;
    paths.sort();
    let cfg_path = dir.join("run.cfg");
    let expected = if cfg_path.exists() {
        crate::config::RunConfig::load(&cfg_path)?.hash()
    } else {
        let ck = paths
            .iter()
            .find(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no run.cfg or checkpoint", dir.display())))?;
        Checkpoint::load(ck)?.config_hash
    };
    let mut artifacts = Vec::new();
    for p in paths {
        if !p.is_file() {
            continue;
        }
        if let Some(found) = artifact_hash(&p)? {
            let ok = found.as_deref() == Some(expected.as_str());
            artifacts.push(ArtifactCheck { path: p, found, ok });
        }
    }
    Ok(VerifyReport { expected, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn ratio_handles_unreached_runs() {
        let r = SeedResult {
            seed: 0,
            attention_steps: Some(20),
            direct_steps: None,
        };
        assert_eq!(r.ratio(100), 5.0);
        let r = SeedResult {
            seed: 0,
            attention_steps: None,
            direct_steps: Some(5),
        };
        assert_eq!(r.ratio(100), 0.0);
        let r = SeedResult {
            seed: 0,
            attention_steps: Some(0),
            direct_steps: Some(0),
        };
        assert_eq!(r.ratio(100), 1.0);
        let r = SeedResult {
            seed: 0,
            attention_steps: Some(0),
            direct_steps: Some(30),
        };
        assert_eq!(r.ratio(100), 30.0);
    }

    #[test]
    fn threshold_rules() {
        assert!((ThresholdRule::Relative(1.05).threshold(3.0, 2.0) - 2.1).abs() < 1e-12);
        assert!((ThresholdRule::Gap(0.05).threshold(3.0, 2.0) - 2.05).abs() < 1e-12);
        assert_eq!(ThresholdRule::Gap(0.0).threshold(3.0, 2.0), 2.0);
    }
}
