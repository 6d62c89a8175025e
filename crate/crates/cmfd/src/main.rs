use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmfd::checkpoint;
use cmfd::config::PipelineConfig;
use cmfd::dataset::{self, Corpus, Manifest, Split};
use cmfd::detect::{self, DetectOptions, Detector, ScoreSource};
use cmfd::evaluate::{self, EvaluateOptions};
use cmfd::plugins::Registry;
use cmfd::{io, render, train, Error, Result};
use cmfd_core::backbone::Backbone;
use cmfd_core::metrics::DetectedRule;

#[derive(Parser)]
#[command(name = "cmfd", version, about = "Copy-move forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML pipeline configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set selection.s_t=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a forgery dataset from an annotated corpus.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (images plus `<name>.mask<k>.png` regions).
        #[arg(long, conflicts_with = "procedural")]
        corpus: Option<PathBuf>,
        /// Write this many procedural scenes to `<out>/corpus` and use them
        /// (the default without a corpus, one scene per sample).
        #[arg(long)]
        procedural: Option<usize>,
        /// Side of procedural scenes.
        #[arg(long, default_value_t = 256)]
        procedural_size: usize,
        /// Number of samples; defaults to `dataset.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Master seed; defaults to `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `dataset.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backbone on the train split of a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest written by `generate`.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to write; a JSON loss log goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a random init.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the detector on images.
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input images.
        images: Vec<PathBuf>,
        /// Backbone checkpoint; defaults to `$CMFD_CHECKPOINT_DIR/backbone.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use a randomly initialized backbone when no checkpoint exists.
        #[arg(long)]
        random_init: bool,
        /// Stop after the backbone score map.
        #[arg(long)]
        stage1_only: bool,
        /// Threshold the integrated map instead of CRF refinement.
        #[arg(long)]
        no_crf: bool,
        /// External score map (file for one image, directory of `<stem>.png` otherwise).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Re-run fusion and refinement from a `record.json` and write the mask here.
        #[arg(long, value_name = "RECORD", conflicts_with_all = ["stage1_only", "scores"])]
        replay: Option<PathBuf>,
        /// Output directory, or the mask file with `--replay`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against a manifest.
    Evaluate {
        /// Dataset manifest with the ground-truth masks.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<id>/mask.png` or `<id>.png` predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// Only score `train` or `test` samples.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Score missing predictions as empty masks instead of failing.
        #[arg(long)]
        allow_missing: bool,
        /// Predicted pixels needed to flag an image (and count it as detected).
        #[arg(long, default_value_t = 1)]
        min_area: usize,
        /// JSON report path; the text table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw scores, boxes, matches and the mask contour over the image.
    Render {
        /// `record.json` written by `detect`.
        record: PathBuf,
        /// PNG to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Generate {
            config,
            corpus,
            procedural,
            procedural_size,
            n,
            seed,
            out,
        } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| cfg.dataset.out.clone());
            let seed = seed.unwrap_or(cfg.seed);
            let n = n.unwrap_or(cfg.dataset.n);
            let corpus = match (corpus.or_else(|| cfg.dataset.corpus.clone()), procedural) {
                (Some(dir), _) => {
                    if !dir.is_dir() {
                        return Err(Error::data(&dir, "corpus directory not found"));
                    }
                    Corpus::open(&dir)?
                }
                (None, count) => {
                    let count = count.unwrap_or(n).max(1);
                    dataset::write_procedural_corpus(&out.join("corpus"), count, procedural_size, seed)?
                }
            };
            let report = dataset::build_dataset(&corpus, &out, n, seed, &cfg.dataset)?;
            println!(
                "{} samples in {} ({} reused, {} skipped)",
                report.manifest.entries.len(),
                out.join(dataset::MANIFEST).display(),
                report.reused,
                report.skipped.len()
            );
            Ok(0)
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
        } => {
            let cfg = config.load()?;
            let m = Manifest::read(&manifest)?;
            let data = m.load_split(Split::Train, cfg.train.side)?;
            let model = match resume {
                Some(p) => checkpoint::load(&p)?,
                None => Backbone::with_random_init(cfg.backbone.clone(), cfg.seed)?,
            };
            log::info!("training on {} samples at {}x{}", data.len(), cfg.train.side, cfg.train.side);
            let (model, log) = train::train(model, &data, &cfg.train.optimizer, |e, l| {
                log::info!("epoch {e}: mean loss {l:.5}");
            })?;
            checkpoint::save(&out, &model)?;
            io::write_json(&out.with_extension("log.json"), &log)?;
            println!("initial loss {:.5}, final epoch loss {:.5}", log.initial_loss, log.epoch_losses.last().copied().unwrap_or(f64::NAN));
            Ok(0)
        }
        Command::Detect {
            config,
            images,
            checkpoint,
            random_init,
            stage1_only,
            no_crf,
            scores,
            replay,
            out,
        } => {
            let cfg = config.load()?;
            let plugins = Registry::new(&cfg.plugins)?;
            if let Some(record) = replay {
                let out = out.ok_or_else(|| Error::Usage("--replay needs --out for the mask".into()))?;
                let mask = detect::replay(&record, &cfg, &plugins, no_crf)?;
                io::write_mask(&out, &mask)?;
                return Ok(0);
            }
            if images.is_empty() {
                return Err(Error::Usage("no input images".into()));
            }
            let scores = match scores {
                Some(p) if p.is_dir() => Some(ScoreSource::Dir(p)),
                Some(p) if images.len() == 1 => Some(ScoreSource::File(p)),
                Some(_) => return Err(Error::Usage("--scores with several images must be a directory".into())),
                None => None,
            };
            let model = if scores.is_some() {
                None
            } else {
                Some(load_model(&cfg, checkpoint.as_deref(), random_init)?)
            };
            let detector = Detector {
                config: &cfg,
                model: model.as_ref(),
                plugins: &plugins,
                options: DetectOptions {
                    stage1_only,
                    no_crf,
                    scores,
                },
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let mut worst = 0;
            for (path, result) in detector.run_batch(&images, &out) {
                match result {
                    Ok(r) => println!("{}: {} boxes, {} matched points", path.display(), r.boxes.len(), match_count(&out, &r)),
                    Err(e) => {
                        eprintln!("error: {}: {e}", path.display());
                        worst = worst.max(e.exit_code() as u8);
                    }
                }
            }
            Ok(worst)
        }
        Command::Evaluate {
            manifest,
            predictions,
            split,
            allow_missing,
            min_area,
            out,
        } => {
            let m = Manifest::read(&manifest)?;
            let opts = EvaluateOptions {
                split,
                allow_missing,
                rule: DetectedRule::MinPredicted(min_area.max(1) as u64),
                min_area,
            };
            let report = evaluate::evaluate(&m, &predictions, &opts)?;
            if let Some(p) = out {
                io::write_json(&p, &report)?;
            }
            print!("{}", evaluate::text_table(&report));
            Ok(0)
        }
        Command::Render { record, out } => {
            render::render_record(&record, &out)?;
            Ok(0)
        }
    }
}

fn load_model(cfg: &PipelineConfig, explicit: Option<&Path>, random_init: bool) -> Result<Backbone> {
    match checkpoint::resolve(explicit) {
        Some(p) => checkpoint::load(&p),
        None if random_init => {
            log::warn!("no checkpoint: using a randomly initialized backbone");
            Ok(Backbone::with_random_init(cfg.backbone.clone(), cfg.seed)?)
        }
        None => Err(Error::Usage(format!(
            "no backbone checkpoint (pass --checkpoint, set {}, or use --random-init)",
            checkpoint::CACHE_ENV
        ))),
    }
}

fn match_count(out: &Path, r: &detect::DetectionRecord) -> usize {
    r.matches
        .as_ref()
        .and_then(|p| io::read_json::<cmfd_core::keypoint::MatchSet>(&out.join(&r.id).join(p)).ok())
        .map_or(0, |m| m.len())
}
