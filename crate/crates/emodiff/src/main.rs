//! Command-line entry point. Every verb resolves a run configuration the
//! same way: a named profile supplies the baseline, an optional key=value
//! config file overrides individual keys, and the global flags override
//! last. Exit codes: 0 success, 1 configuration or validation failure,
//! 2 numeric failure during training or sampling.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emodiff::harness::commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_pretrain_adapter, cmd_sample, cmd_train_diffusion,
    cmd_train_vae, AblationAxis, SampleInput, SampleModelPaths,
};
use emodiff::harness::{dtype_from_bits, parse_config_text, RunConfig};
use emodiff::seqcore::io::Split;
use emodiff::vae::Region;
use emodiff::{Error, Result};

#[derive(Parser)]
#[command(
    name = "emodiff",
    version,
    about = "Audio-conditioned emotional 3D facial animation: region-split sequence VAEs, \
             a conditional latent diffusion model, and an emotion classifier guiding the \
             upper face"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run seed controlling data generation, initialization, and sampling
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint storage precision in bits (compute is always f64)
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Baseline settings: "tiny" runs on a laptop, "paper" is full scale
    #[arg(long, global = true, default_value = "tiny", value_parser = ["tiny", "paper"])]
    profile: String,
    /// key=value file overriding individual profile settings
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic dataset
    GenData {
        /// Output directory for sequences, audio features, and the manifest
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory
        #[arg(long)]
        force: bool,
        /// Number of sequence/audio pairs (at least one per emotion)
        #[arg(long)]
        n: Option<usize>,
        /// Frames per sequence
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the sequence VAE for one face region
    TrainVae {
        /// Face region: upper, mouth, or full
        #[arg(long)]
        region: String,
        /// Dataset directory containing manifest.tsv
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint, log, and config snapshot
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frozen emotion classifier on ground-truth upper-face clips
    PretrainAdapter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser in a frozen VAE's latent space
    TrainDiff {
        /// Face region: upper, mouth, or full
        #[arg(long)]
        region: String,
        #[arg(long)]
        data: PathBuf,
        /// VAE checkpoint for this region
        #[arg(long)]
        vae: PathBuf,
        /// Frozen classifier checkpoint; required for the upper region when
        /// weights.lambda_adapter > 0, forbidden otherwise
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate blendshape sequences from audio features
    Sample {
        /// Upper-region denoiser checkpoint (with --mouth)
        #[arg(long, requires = "mouth", conflicts_with = "full")]
        upper: Option<PathBuf>,
        /// Mouth-region denoiser checkpoint (with --upper)
        #[arg(long, requires = "upper", conflicts_with = "full")]
        mouth: Option<PathBuf>,
        /// Full-face denoiser checkpoint (instead of --upper/--mouth)
        #[arg(long)]
        full: Option<PathBuf>,
        /// One audio feature file; --out names the generated clip
        #[arg(long, conflicts_with_all = ["data", "gt_out"])]
        audio: Option<PathBuf>,
        /// Dataset directory; samples every sequence of --split
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset split to sample: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Output file (--audio) or directory (--data)
        #[arg(long)]
        out: PathBuf,
        /// Also copy the matching ground-truth clips into this directory
        #[arg(long)]
        gt_out: Option<PathBuf>,
        /// Denoising steps; defaults to infer.steps from the config
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare generated sequences against ground truth
    Eval {
        /// Directory of generated .edbs files
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth .edbs files with matching names
        #[arg(long)]
        gt: PathBuf,
        /// Report file (TSV, one row per sequence plus the mean)
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-sequence metric chart
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train and evaluate every variant along one ablation axis
    Ablate {
        /// Axis: latent_shape, conditioning, layers, lambda, or structure
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Profile, then config file, then flags. Returns the resolved config and
/// the text snapshotted into output directories: the config file verbatim
/// when one was given, the serialized resolved config otherwise.
fn resolve_config(global: &GlobalArgs) -> Result<(RunConfig, String)> {
    let mut cfg = RunConfig::profile(&global.profile)?;
    let file_text = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            cfg.apply_map(&parse_config_text(&text)?)?;
            Some(text)
        }
        None => None,
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(bits) = &global.precision {
        cfg.precision = dtype_from_bits(bits)?;
    }
    let snapshot = file_text.unwrap_or_else(|| cfg.to_text());
    Ok((cfg, snapshot))
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, snapshot) = resolve_config(&cli.global)?;
    match cli.command {
        Command::GenData { out, force, n, frames } => {
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(frames) = frames {
                cfg.data.frames = frames;
            }
            let snapshot = if cli.global.config.is_some() { snapshot } else { cfg.to_text() };
            cmd_gen_data(&cfg, &out, force, &snapshot)?;
        }
        Command::TrainVae { region, data, out } => {
            cmd_train_vae(&cfg, Region::from_name(&region)?, &data, &out, &snapshot)?;
        }
        Command::PretrainAdapter { data, out } => {
            cmd_pretrain_adapter(&cfg, &data, &out, &snapshot)?;
        }
        Command::TrainDiff {
            region,
            data,
            vae,
            adapter,
            out,
        } => {
            cmd_train_diffusion(
                &cfg,
                Region::from_name(&region)?,
                &data,
                &vae,
                adapter.as_deref(),
                &out,
                &snapshot,
            )?;
        }
        Command::Sample {
            upper,
            mouth,
            full,
            audio,
            data,
            split,
            out,
            gt_out,
            steps,
        } => {
            if let Some(steps) = steps {
                cfg.infer_steps = steps;
            }
            let models = match (&upper, &mouth, &full) {
                (Some(u), Some(m), None) => SampleModelPaths::Dual { upper: u, mouth: m },
                (None, None, Some(f)) => SampleModelPaths::Single(f),
                _ => {
                    return Err(Error::Config(
                        "pass either --upper with --mouth, or --full".into(),
                    ))
                }
            };
            let input = match (&audio, &data) {
                (Some(a), None) => SampleInput::Audio(a),
                (None, Some(d)) => SampleInput::DatasetSplit {
                    data_dir: d,
                    split: Split::from_name(&split)?,
                },
                _ => {
                    return Err(Error::Config(
                        "pass exactly one of --audio or --data".into(),
                    ))
                }
            };
            cmd_sample(&cfg, &models, &input, &out, gt_out.as_deref(), &snapshot)?;
        }
        Command::Eval { pred, gt, out, svg } => {
            cmd_eval(&pred, &gt, &out, svg.as_deref())?;
        }
        Command::Ablate { axis, data, out } => {
            cmd_ablate(
                &cfg,
                &data,
                AblationAxis::from_name(&axis)?,
                &out,
                &snapshot,
            )?;
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("EMODIFF_THREADS") {
        let threads: usize = raw
            .parse()
            .ok()
            .filter(|t| *t >= 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "EMODIFF_THREADS must be a positive integer, got {raw:?}"
                ))
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool setup failed: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
