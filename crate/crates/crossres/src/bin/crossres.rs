//! Command-line front end over the harness: dataset synthesis, denoiser
//! pretraining, dual-branch training, tiled prediction, evaluation, and
//! the four-mode ablation.
//!
//! Every failure is one `error: ...` line on stderr and a nonzero exit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossres::config::RunConfig;
use crossres::harness::ablate::cmd_ablate;
use crossres::harness::data::generate_splits;
use crossres::harness::predict::{cmd_evaluate, cmd_predict};
use crossres::harness::trainer::{cmd_pretrain, cmd_train, DENOISER_DIR};

#[derive(Parser)]
#[command(
    name = "crossres",
    about = "Weakly supervised segmentation across resolution gaps, on synthetic scenes",
    version
)]
struct Cli {
    /// Run configuration (TOML). The desk-scale profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, logs, rasters, and reports.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train/val/test scene splits for the configured data.
    Generate {
        /// Overwrite splits that already exist.
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser used as the frozen feature prior.
    Pretrain,
    /// Train the segmentation branches in the configured ablation mode.
    Train {
        /// Pretrained denoiser checkpoint. Defaults to <out>/denoiser,
        /// where `pretrain` puts it.
        #[arg(long)]
        denoiser: Option<PathBuf>,

        /// Continue a saved train checkpoint up to the configured
        /// max_steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write target-space label rasters for every scene of a split.
    Predict {
        /// Train checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,

        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score prediction rasters against a split's ground truth.
    Evaluate {
        /// Directory of pred_<scene>.npy rasters, as written by `predict`.
        #[arg(long)]
        predictions: PathBuf,

        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run all four ablation modes over shared seeds and tabulate
    /// median test mIoU.
    Ablate {
        /// Comma-separated list of at least three training seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(cli: &Cli) -> crossres::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::desk(0),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> crossres::Result<bool> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Generate { force } => {
            let root = PathBuf::from(&cfg.data.root);
            let summary = generate_splits(&cfg, &root, *force)?;
            for (split, scenes) in &summary.scenes {
                println!("split={split} scenes={scenes}");
            }
            println!("root={} fingerprint={}", root.display(), summary.fingerprint);
        }
        Command::Pretrain => {
            let outcome = cmd_pretrain(&cfg, out)?;
            if let (Some(first), Some(last)) = (outcome.records.first(), outcome.records.last()) {
                println!("steps={} first_loss={} last_loss={}", outcome.records.len(), first.loss, last.loss);
            } else {
                println!("steps=0");
            }
            println!("checkpoint={}", outcome.checkpoint_dir.display());
        }
        Command::Train { denoiser, resume } => {
            let default_denoiser = out.join(DENOISER_DIR);
            let denoiser_dir: &Path = denoiser.as_deref().unwrap_or(&default_denoiser);
            let denoiser_arg = if cfg.train.mode.needs_denoiser() && resume.is_none() {
                if !denoiser_dir.join("meta.toml").exists() {
                    return Err(crossres::Error::Checkpoint(format!(
                        "no denoiser checkpoint at {}; run `crossres pretrain` first or pass --denoiser",
                        denoiser_dir.display()
                    )));
                }
                Some(denoiser_dir)
            } else {
                None
            };
            let outcome = cmd_train(&cfg, denoiser_arg, out, resume.as_deref())?;
            println!("mode={} steps={}", cfg.train.mode, outcome.final_step);
            if let Some(last) = outcome.log.records.last() {
                println!(
                    "final step={} l1={} total={}",
                    last.step, last.l1, last.total
                );
            }
            println!("checkpoint={}", outcome.checkpoint_dir.display());
            println!("log={}", outcome.log_path.display());
        }
        Command::Predict { checkpoint, split } => {
            let outcome = cmd_predict(checkpoint, split, out)?;
            println!("split={split} rasters={}", outcome.files.len());
            println!("out={}", out.display());
        }
        Command::Evaluate { predictions, split } => {
            let outcome = cmd_evaluate(&cfg, split, predictions, out)?;
            println!("{}", outcome.report.summary_line());
            println!("scored={} csv={}", outcome.scored, out.join(format!("iou_{split}.csv")).display());
            if !outcome.skipped.is_empty() {
                for issue in &outcome.skipped {
                    eprintln!(
                        "error: scene {} skipped: {}",
                        issue.scene,
                        issue.reason.replace('\n', " ")
                    );
                }
                return Ok(false);
            }
        }
        Command::Ablate { seeds } => {
            let outcome = cmd_ablate(&cfg, seeds, out)?;
            for row in &outcome.rows {
                println!("mode={} median_miou={:.6}", row.mode, row.median_miou);
            }
            println!("dataset={}", outcome.dataset_sha256);
            println!("csv={}", outcome.csv_path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
