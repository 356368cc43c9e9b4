//! `disth`: data generation, encoder pretraining, training, inference and evaluation.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use disth_core::dataset::{build_dataset, Dataset, DatasetConfig, Split};
use disth_core::eval::{self, AblationVariant, GuidanceMode};
use disth_core::metadata::AcquisitionParams;
use disth_core::style_encoders::{pretrain_clip, retrieval_accuracy, ClipConfig, EncoderPair};
use disth_core::trainer::{fit, Guidance, TrainConfig, Trainer, FINAL_CHECKPOINT};
use disth_core::Image;
use serde::de::DeserializeOwned;
use serde::Serialize;

const ENCODER_FILE: &str = "encoders.ckpt";
const WORKERS_ENV: &str = "DISTH_NUM_WORKERS";

#[derive(Parser)]
#[command(name = "disth", version, about = "Disentangled MRI contrast harmonization guided by images or acquisition metadata")]
struct Cli {
    /// Log verbosity: -v info, -vv debug. RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired phantom dataset.
    GenData {
        /// Dataset config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastively pretrain the image and metadata style encoders.
    PretrainClip {
        #[arg(long)]
        data: PathBuf,
        /// Output directory (receives encoders.ckpt, config.json, clip_log.csv, retrieval.json).
        #[arg(long)]
        out: PathBuf,
        /// Encoder config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the harmonization model with frozen style encoders.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint file or the directory written by pretrain-clip.
        #[arg(long)]
        clip: PathBuf,
        /// Training config JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (receives model.ckpt, last.ckpt, losses.csv, config.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Harmonize one image toward a target image or target acquisition metadata.
    Harmonize {
        #[command(flatten)]
        model: CheckpointArg,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source-by-target contrast PSNR/SSIM matrices on a dataset split.
    EvalMatrix {
        #[command(flatten)]
        model: CheckpointArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        guidance: GuidanceOpt,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the five ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Base training config JSON shared by every variant.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained encoders; pretrained into OUT/clip when omitted.
        #[arg(long)]
        clip: Option<PathBuf>,
        /// Encoder config for that pretraining.
        #[arg(long, conflicts_with = "clip")]
        clip_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the anatomy map of one image.
    ExportBeta {
        #[command(flatten)]
        model: CheckpointArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 prompt retrieval accuracy of pretrained encoders, as JSON.
    ClipEval {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CheckpointArg {
    /// Model checkpoint file or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct GuidanceArgs {
    /// Target-contrast reference image (PNG).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Target acquisition metadata sidecar (JSON).
    #[arg(long)]
    metadata: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceOpt {
    Image,
    Text,
}

impl From<GuidanceOpt> for GuidanceMode {
    fn from(g: GuidanceOpt) -> Self {
        match g {
            GuidanceOpt::Image => GuidanceMode::Image,
            GuidanceOpt::Text => GuidanceMode::Text,
        }
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn echo_config(dir: &Path, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config)?).with_context(|| format!("writing {}", path.display()))
}

/// A file path, or a directory holding `default_name`.
fn resolve(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_model(arg: &CheckpointArg) -> Result<disth_core::trainer::HarmonizationModel<f32>> {
    Ok(Trainer::load(&resolve(&arg.checkpoint, FINAL_CHECKPOINT))?.model)
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| format!("{WORKERS_ENV}={raw:?} is not a worker count"))?;
    if n == 0 {
        bail!("{WORKERS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let mut cfg: DatasetConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifest = build_dataset(&cfg, &out)?;
            echo_config(&out, &cfg)?;
            println!("wrote {} samples for {} anatomies to {}", manifest.samples.len(), manifest.anatomies.len(), out.display());
        }
        Command::PretrainClip { data, out, config, seed } => {
            let mut cfg: ClipConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::load(&data)?;
            echo_config(&out, &cfg)?;
            let (pair, log) = pretrain_clip(&ds, &cfg)?;
            pair.save(&out.join(ENCODER_FILE))?;
            let mut csv = String::from("step,loss,temperature\n");
            for r in &log {
                csv.push_str(&format!("{},{},{}\n", r.step, r.loss, r.temperature));
            }
            fs::write(out.join("clip_log.csv"), csv)?;
            let report = retrieval_accuracy(&pair, &ds, Split::Val)?;
            fs::write(out.join("retrieval.json"), serde_json::to_string_pretty(&report)?)?;
            println!("encoders saved to {}; validation top-1 retrieval {:.3}", out.join(ENCODER_FILE).display(), report.top1_accuracy);
        }
        Command::Train { data, clip, config, out, seed, resume } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::load(&data)?;
            let encoders = EncoderPair::load(&resolve(&clip, ENCODER_FILE))?;
            echo_config(&out, &cfg)?;
            let outcome = fit(&ds, &cfg, encoders, &out, resume.as_deref())?;
            println!(
                "trained {} steps{}; checkpoint {}",
                outcome.steps,
                if outcome.stopped_by_time { " (time budget reached)" } else { "" },
                outcome.checkpoint.display()
            );
        }
        Command::Harmonize { model, input, guidance, out } => {
            let model = load_model(&model)?;
            let src = Image::load_png(&input)?;
            let target = guidance.target.as_deref().map(Image::load_png).transpose()?;
            let metadata = match guidance.metadata.as_deref() {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading metadata {}", p.display()))?;
                    let acq: AcquisitionParams =
                        serde_json::from_str(&text).with_context(|| format!("parsing metadata {}", p.display()))?;
                    Some(acq)
                }
                None => None,
            };
            let result = model.harmonize(&src, &Guidance::from_options(target, metadata)?)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            result.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::EvalMatrix { model, data, guidance, out, split } => {
            let model = load_model(&model)?;
            let ds = Dataset::load(&data)?;
            let split = Split::parse(&split)?;
            let mode: GuidanceMode = guidance.into();
            let m = eval::cross_contrast_matrix(&model, &ds, split, mode)?;
            m.write(&out)?;
            eval::identity_matrix(&ds, split)?.write(&out.join("baseline"))?;
            echo_config(&out, &serde_json::json!({ "guidance": mode, "split": split, "data": data }))?;
            let (p, s) = m.overall();
            println!("{} guidance: mean PSNR {p:.2} dB, mean SSIM {s:.4}; written to {}", mode.as_str(), out.display());
        }
        Command::Ablate { data, config, out, clip, clip_config, seed } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::load(&data)?;
            echo_config(&out, &cfg)?;
            let encoders = match clip {
                Some(p) => EncoderPair::load(&resolve(&p, ENCODER_FILE))?,
                None => {
                    let mut clip_cfg: ClipConfig = read_json(clip_config.as_deref())?;
                    clip_cfg.seed = cfg.seed;
                    let (pair, _) = pretrain_clip(&ds, &clip_cfg)?;
                    pair.save(&out.join("clip").join(ENCODER_FILE))?;
                    pair
                }
            };
            let rows = eval::run_ablation(&ds, &encoders, &cfg, &AblationVariant::ALL, &out)?;
            print!("{}", eval::ablation_csv(&rows));
            if let Some(bad) = rows.iter().find(|r| r.error.is_some()) {
                bail!("ablation variant {:?} failed: {}", bad.label, bad.error.as_deref().unwrap_or_default());
            }
        }
        Command::ExportBeta { model, input, out } => {
            let model = load_model(&model)?;
            let beta = model.extract_beta(&Image::load_png(&input)?)?;
            beta.export(&out)?;
            println!("wrote β ({} channels, {}x{}) to {}", beta.channels, beta.height, beta.width, out.display());
        }
        Command::ClipEval { clip, data, split, out } => {
            let pair: EncoderPair<f32> = EncoderPair::load(&resolve(&clip, ENCODER_FILE))?;
            let ds = Dataset::load(&data)?;
            let report = retrieval_accuracy(&pair, &ds, Split::parse(&split)?)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = init_workers().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
