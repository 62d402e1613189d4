use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use textinv::config::RunConfig;
use textinv::corpus::{held_out_styles, reference_image, Scale};
use textinv::eval::{self, AccuracyConfig, AccuracyGeneration};
use textinv::inversion::{direct_optimize, train_inversion};
use textinv::persist::{self, Checkpoint, MetricsRow};
use textinv::pipeline;
use textinv::synthesis::{self, FrozenModel, GenerationRequest, SampleMode, StyleRecord};
use textinv::{Error, Result};

/// Environment variable naming the default run directory.
const RUN_DIR_ENV: &str = "TEXTINV_RUN_DIR";

/// Render seed of the held-out reference images.
const HELD_OUT_SEED: u64 = 3;

#[derive(Parser)]
#[command(
    name = "textinv",
    version,
    about = "Single-image textual inversion on a small latent diffusion model"
)]
struct Cli {
    /// Run directory for default inputs and outputs [env: TEXTINV_RUN_DIR, default: ./run]
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (flat `key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.steps=500`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Tone {
    Keep,
    MatchReference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stochastic,
    Deterministic,
}

impl From<Mode> for SampleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Stochastic => SampleMode::Stochastic,
            Mode::Deterministic => SampleMode::Deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the procedural corpus, a captions file and held-out style references
    GenCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the backbone and write a checkpoint
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn a pseudo-word for one image
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optimize the embedding directly instead of training the attention module
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        template: Option<String>,
        /// Use this learning rate instead of base_lr x devices x batch
        #[arg(long)]
        lr_override: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override an inversion key, e.g. `--set inversion.layers=2`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Text-to-image generation with a learned style
    Generate {
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "a painting of [C]")]
        template: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "stochastic")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refuse style records whose config hash differs from the checkpoint
        #[arg(long)]
        strict: bool,
    },
    /// Image-to-image transfer of a content image into a learned style
    Transfer {
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long, value_enum, default_value = "keep")]
        tone: Tone,
        /// Tone target for `--tone match-reference`
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "a painting of [C]")]
        template: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Steps-to-threshold of attention inversion versus direct optimization
    BenchConvergence {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Nearest-reference accuracy of generated samples
    EvalAccuracy {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Style records, one per reference
        #[arg(long = "style", required = true)]
        styles: Vec<PathBuf>,
        #[arg(long = "reference", required = true)]
        references: Vec<PathBuf>,
        /// Content images for transfer; txt2img when omitted
        #[arg(long = "content")]
        contents: Vec<PathBuf>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise differences of one style rendered under several templates
    EvalEditability {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long = "template", required = true)]
        templates: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that every artifact in a run directory carries the same config hash
    VerifyRun {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn run_dir(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("run"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

fn load_model(ckpt: &Option<PathBuf>, dir: &Path) -> Result<(FrozenModel, RunConfig)> {
    let path = ckpt.clone().unwrap_or_else(|| dir.join("backbone.ckpt"));
    pipeline::from_checkpoint(&Checkpoint::load(&path)?)
}

fn load_style(path: &Path, model: &FrozenModel, strict: bool) -> Result<StyleRecord> {
    let (style, warning) = persist::load_style(path, Some(&model.config_hash), strict)?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    Ok(style)
}

fn load_image(path: &Path) -> Result<textinv::codec::PixelImage> {
    Ok(persist::load_png(path)?.0)
}

fn run(cli: Cli) -> Result<()> {
    let dir = run_dir(&cli.run_dir);
    match cli.cmd {
        Cmd::GenCorpus { config, out } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| dir.join("corpus"));
            std::fs::create_dir_all(&out)?;
            let hash = cfg.hash();
            let mut captions = String::new();
            for (i, ex) in pipeline::corpus(&cfg)?.iter().enumerate() {
                let name = format!("{i:04}.png");
                persist::save_png(&out.join(&name), &ex.image, &hash)?;
                captions += &format!("{name}\t{}\n", ex.caption);
            }
            std::fs::write(out.join("captions.tsv"), captions)?;
            let held = out.join("heldout");
            std::fs::create_dir_all(&held)?;
            for s in held_out_styles() {
                let img = reference_image(&s, Scale::Fine, cfg.int("image.size"), HELD_OUT_SEED)?;
                persist::save_png(&held.join(format!("{}.png", s.id())), &img, &hash)?;
            }
            println!("wrote corpus to {}", out.display());
        }
        Cmd::Pretrain { config, out } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| dir.join("backbone.ckpt"));
            ensure_parent(&out)?;
            let (model, losses) = pipeline::pretrain(&cfg)?;
            println!(
                "pretrained {} parameters, config hash {}",
                model.denoiser.parameter_count(),
                model.config_hash
            );
            pipeline::to_checkpoint(&model, &cfg).save(&out)?;
            let parent = out.parent().unwrap_or(Path::new("."));
            std::fs::write(parent.join("run.cfg"), cfg.canonical())?;
            std::fs::write(parent.join("vocab.txt"), model.vocab.to_text())?;
            let id = persist::run_id(&model.config_hash, cfg.u64("pretrain.seed"));
            let rows: Vec<MetricsRow> = losses
                .iter()
                .enumerate()
                .map(|(i, l)| MetricsRow {
                    run_id: id.clone(),
                    variant: "backbone".into(),
                    step: i + 1,
                    loss: *l,
                    wall_time_s: 0.0,
                })
                .collect();
            persist::write_metrics(&parent.join("pretrain_loss.csv"), &rows)?;
            println!("wrote {}", out.display());
        }
        Cmd::Invert {
            image,
            ckpt,
            out,
            baseline,
            template,
            lr_override,
            steps,
            seed,
            overrides,
        } => {
            let (model, mut cfg) = load_model(&ckpt, &dir)?;
            for o in &overrides {
                if !o.starts_with("inversion.") {
                    return Err(Error::Config(format!(
                        "only inversion.* keys can be overridden here: {o}"
                    )));
                }
                cfg.apply_override(o)?;
            }
            let y = load_image(&image)?;
            let mut train = cfg.inversion_training();
            if let Some(t) = template {
                train.template = t;
            }
            train.lr_override = lr_override;
            if let Some(s) = steps {
                train.steps = s;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            let ctx = model.context();
            let run = if baseline {
                direct_optimize(&y, &ctx, &train)?
            } else {
                train_inversion(&y, &ctx, &cfg.inversion_module(), &train)?.run
            };
            println!(
                "{} inversion: {} steps, effective lr {}, final probe loss {:?}",
                run.variant.as_str(),
                run.steps_run,
                run.effective_lr,
                run.evals.last().map(|e| e.loss)
            );
            let style = StyleRecord {
                embedding: run.embedding.clone(),
                template: train.template.clone(),
                config_hash: model.config_hash.clone(),
                seed: train.seed,
                steps: run.steps_run as u64,
            };
            let out = out.unwrap_or_else(|| dir.join("style.style"));
            ensure_parent(&out)?;
            persist::save_style(&out, &style)?;
            let id = persist::run_id(&model.config_hash, train.seed);
            let rows: Vec<MetricsRow> = run
                .losses
                .iter()
                .zip(&run.step_times)
                .enumerate()
                .map(|(i, (l, w))| MetricsRow {
                    run_id: id.clone(),
                    variant: run.variant.as_str().into(),
                    step: i + 1,
                    loss: *l,
                    wall_time_s: *w,
                })
                .collect();
            persist::write_metrics(&out.with_extension("loss.csv"), &rows)?;
            println!("wrote {}", out.display());
        }
        Cmd::Generate {
            style,
            ckpt,
            template,
            seed,
            mode,
            out,
            strict,
        } => {
            let (model, _) = load_model(&ckpt, &dir)?;
            let style = load_style(&style, &model, strict)?;
            let img = synthesis::txt2img(&GenerationRequest::txt2img(style, &template, seed, mode.into()), &model)?;
            let out = out.unwrap_or_else(|| dir.join(format!("generate-{seed}.png")));
            ensure_parent(&out)?;
            persist::save_png(&out, &img, &model.config_hash)?;
            println!("wrote {}", out.display());
        }
        Cmd::Transfer {
            style,
            ckpt,
            content,
            strength,
            tone,
            reference,
            template,
            seed,
            out,
            strict,
        } => {
            let (model, cfg) = load_model(&ckpt, &dir)?;
            let style = load_style(&style, &model, strict)?;
            let target = match tone {
                Tone::Keep => None,
                Tone::MatchReference => {
                    Some(load_image(reference.as_deref().ok_or_else(|| {
                        Error::InvalidArgument("--tone match-reference needs --reference".into())
                    })?)?)
                }
            };
            let strength = strength.unwrap_or(cfg.real("generate.strength"));
            let req = GenerationRequest::transfer(style, &template, seed, load_image(&content)?, strength);
            let mut img = synthesis::style_transfer(&req, &model)?;
            if let Some(t) = target {
                img = synthesis::tone_transfer(&img, &t)?;
            }
            let out = out.unwrap_or_else(|| dir.join(format!("transfer-{seed}.png")));
            ensure_parent(&out)?;
            persist::save_png(&out, &img, &model.config_hash)?;
            println!("wrote {}", out.display());
        }
        Cmd::BenchConvergence {
            image,
            ckpt,
            seeds,
            out,
            overrides,
        } => {
            let (model, mut cfg) = load_model(&ckpt, &dir)?;
            for o in &overrides {
                if !(o.starts_with("inversion.") || o.starts_with("bench.")) {
                    return Err(Error::Config(format!(
                        "only inversion.* and bench.* keys can be overridden here: {o}"
                    )));
                }
                cfg.apply_override(o)?;
            }
            let mut bench = cfg.bench()?;
            if let Some(n) = seeds {
                bench.seeds = (0..n as u64).collect();
            }
            let report = eval::run_convergence_benchmark(&load_image(&image)?, &model, &bench)?;
            let out = out.unwrap_or_else(|| dir.join("bench.csv"));
            ensure_parent(&out)?;
            persist::write_metrics(&out, &report.rows)?;
            persist::write_metrics(&out.with_extension("probe.csv"), &report.probe_rows)?;
            print!("{}", report.summary());
            println!("wrote {}", out.display());
        }
        Cmd::EvalAccuracy {
            ckpt,
            styles,
            references,
            contents,
            strength,
            samples,
            out,
        } => {
            let (model, cfg) = load_model(&ckpt, &dir)?;
            if styles.len() != references.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} styles but {} references",
                    styles.len(),
                    references.len()
                )));
            }
            let records = styles
                .iter()
                .map(|p| load_style(p, &model, true))
                .collect::<Result<Vec<_>>>()?;
            let refs = references.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
            let ids: Vec<String> = styles
                .iter()
                .map(|p| {
                    p.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                })
                .collect();
            let generation = if contents.is_empty() {
                AccuracyGeneration::Txt2Img {
                    mode: cfg.get("generate.mode").parse()?,
                }
            } else {
                AccuracyGeneration::Transfer {
                    contents: contents.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?,
                    strength: strength.unwrap_or(cfg.real("generate.strength")),
                }
            };
            let acc = AccuracyConfig {
                samples: samples.unwrap_or(cfg.int("eval.samples")),
                seed: cfg.u64("eval.seed"),
                template: "a painting of [C]".into(),
                generation,
            };
            let report = eval::eval_accuracy(&ids, &records, &refs, &model, &acc)?;
            let controls = eval::random_styles(&model, records.len(), cfg.u64("eval.seed"))?;
            let control = eval::eval_accuracy(&ids, &controls, &refs, &model, &acc)?;
            let out = out.unwrap_or_else(|| dir.join("accuracy.csv"));
            ensure_parent(&out)?;
            std::fs::write(&out, report.to_csv())?;
            std::fs::write(out.with_extension("control.csv"), control.to_csv())?;
            println!(
                "nearest-reference accuracy {:.3} (random-embedding control {:.3}, chance {:.3})",
                report.sample_accuracy(),
                control.sample_accuracy(),
                1.0 / records.len() as f64
            );
        }
        Cmd::EvalEditability {
            ckpt,
            style,
            reference,
            templates,
            seed,
            mode,
            out,
        } => {
            let (model, _) = load_model(&ckpt, &dir)?;
            let style = load_style(&style, &model, true)?;
            let report =
                eval::eval_editability(&style, &load_image(&reference)?, &templates, &model, seed, mode.into())?;
            let out = out.unwrap_or_else(|| dir.join("editability.csv"));
            ensure_parent(&out)?;
            std::fs::write(&out, report.to_csv())?;
            println!(
                "{} pairs, all distinct: {}",
                report.pairs.len(),
                report.all_pairs_distinct()
            );
        }
        Cmd::VerifyRun { dir: d } => {
            let d = d.unwrap_or(dir);
            let report = eval::verify_run(&d)?;
            for a in &report.artifacts {
                println!(
                    "{} {} {}",
                    if a.ok { "ok  " } else { "FAIL" },
                    a.path.display(),
                    a.found.as_deref().unwrap_or("-")
                );
            }
            if !report.ok() {
                return Err(Error::HashMismatch {
                    expected: report.expected,
                    found: "inconsistent artifacts".into(),
                });
            }
            println!("all artifacts carry config hash {}", report.expected);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
