//! Four-mode ablation over shared seeds.
//!
//! Every mode trains once per seed on the same dataset, is evaluated on
//! the test split, and reports the median mIoU over seeds. The denoiser is
//! pretrained once per seed and shared by every mode that needs it, which
//! is what the [diffusion]-scoped compatibility hash exists for.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, CheckpointKind};
use crate::config::{AblationMode, RunConfig};
use crate::error::{Error, Result};
use crate::harness::data::{dataset_fingerprint, load_split};
use crate::harness::predict::{evaluate_predictions, load_predictor};
use crate::harness::trainer::{cmd_pretrain, cmd_train};

pub const ABLATION_CSV: &str = "ablation.csv";

/// Median of an unordered sample; the even case averages the middle pair.
fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub median_miou: f64,
    /// (seed, test mIoU), in the caller's seed order.
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub rows: Vec<AblationRow>,
    pub csv_path: PathBuf,
    pub dataset_sha256: String,
}

/// Pretrains the denoiser for this seed unless `dir` already holds a
/// compatible one. Returns the checkpoint directory and whether it was
/// reused.
fn ensure_pretrained(cfg: &RunConfig, run_dir: &Path) -> Result<(PathBuf, bool)> {
    let ckpt = run_dir.join(crate::harness::trainer::DENOISER_DIR);
    if let Ok(existing) = checkpoint::read_meta(&ckpt) {
        if existing.meta.kind == CheckpointKind::Denoiser
            && existing.meta.seed == cfg.train.seed
            && checkpoint::check_prior_compat(cfg, &existing.meta).is_ok()
            && existing.meta.step == cfg.train.pretrain_steps as u64
        {
            return Ok((ckpt, true));
        }
    }
    let outcome = cmd_pretrain(cfg, run_dir)?;
    Ok((outcome.checkpoint_dir, false))
}

/// Trains `cfg` under `mode_dir` unless a finished checkpoint for exactly
/// this config is already there. Returns the checkpoint directory.
fn ensure_trained(cfg: &RunConfig, denoiser: Option<&Path>, mode_dir: &Path) -> Result<PathBuf> {
    let ckpt = mode_dir.join(crate::harness::trainer::TRAIN_DIR);
    if let Ok(existing) = checkpoint::read_meta(&ckpt) {
        if existing.meta.kind == CheckpointKind::Train
            && existing.meta.config_sha256 == cfg.config_sha256()?
            && existing.meta.step == cfg.train.max_steps as u64
        {
            return Ok(ckpt);
        }
    }
    Ok(cmd_train(cfg, denoiser, mode_dir, None)?.checkpoint_dir)
}

/// Test mIoU of the checkpoint under `ckpt`, scored in the target space.
fn test_miou(root: &Path, ckpt: &Path) -> Result<f64> {
    let mut predictor = load_predictor(ckpt)?;
    let pairs = load_split(root, "test")?;
    let outcome = evaluate_predictions(&pairs, |i| predictor.predict_scene(&pairs[i].image))?;
    if !outcome.skipped.is_empty() {
        return Err(Error::invalid(format!(
            "{} test scenes failed to score",
            outcome.skipped.len()
        )));
    }
    Ok(outcome.report.miou)
}

fn csv_text(rows: &[AblationRow], seeds: &[u64], dataset_sha256: &str) -> String {
    let mut out = String::from("mode,median_miou,dataset_sha256");
    for s in seeds {
        out.push_str(&format!(",seed_{s}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{:.6},{dataset_sha256}", row.mode, row.median_miou));
        for (_, miou) in &row.per_seed {
            out.push_str(&format!(",{miou:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Runs all four modes over `seeds` (at least three) against the dataset
/// named by `base`, which must already exist. Emits `ablation.csv` under
/// `out_dir`: one row per mode, per-mode median test mIoU plus per-seed
/// values, and the dataset fingerprint every row was scored on.
pub fn cmd_ablate(base: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<AblateOutcome> {
    base.validate()?;
    if seeds.len() < 3 {
        return Err(Error::invalid(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(Error::invalid(format!("duplicate seed {s}")));
        }
    }
    let root = PathBuf::from(&base.data.root);
    let dataset_sha256 = dataset_fingerprint(&root)
        .map_err(|e| Error::invalid(format!("dataset not ready under {root:?}: {e}")))?;

    let mut mious: Vec<Vec<(u64, f64)>> = vec![Vec::new(); AblationMode::ALL.len()];
    for &seed in seeds {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        let mut seed_cfg = base.clone();
        seed_cfg.train.seed = seed;
        let needs_prior = AblationMode::ALL.iter().any(|m| m.needs_denoiser());
        let denoiser = if needs_prior {
            Some(ensure_pretrained(&seed_cfg, &seed_dir)?.0)
        } else {
            None
        };
        for (mi, &mode) in AblationMode::ALL.iter().enumerate() {
            let mut cfg = seed_cfg.clone();
            cfg.train.mode = mode;
            let mode_dir = seed_dir.join(mode.name());
            let prior = if mode.needs_denoiser() {
                denoiser.as_deref()
            } else {
                None
            };
            let trained = ensure_trained(&cfg, prior, &mode_dir)?;
            let miou = test_miou(&root, &trained)?;
            mious[mi].push((seed, miou));
        }
    }

    let rows: Vec<AblationRow> = AblationMode::ALL
        .iter()
        .zip(mious)
        .map(|(&mode, per_seed)| AblationRow {
            mode,
            median_miou: median(per_seed.iter().map(|&(_, m)| m).collect()),
            per_seed,
        })
        .collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(ABLATION_CSV);
    std::fs::write(&csv_path, csv_text(&rows, seeds, &dataset_sha256))
        .map_err(|e| Error::io(&csv_path, e))?;
    Ok(AblateOutcome {
        rows,
        csv_path,
        dataset_sha256,
    })
}
