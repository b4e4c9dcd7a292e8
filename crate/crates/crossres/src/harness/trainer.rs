//! Pretraining and dual-branch training loops.
//!
//! Randomness is split into named ChaCha streams derived from the config
//! seed: `crop-pool` (the fixed crop inventory), `pretrain` (denoising step
//! and noise draws), and `train-picks` (batch picks). The train stream's
//! word position is recorded in checkpoints, so a resumed run replays the
//! exact batch sequence a continuous run would have seen.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointKind, DENOISER_PREFIX};
use crate::config::{AblationMode, RunConfig};
use crate::diffusion::{ddpm_train_step, DenoiserNet};
use crate::error::{Error, Result};
use crate::harness::data::{assemble_batch, load_split, CropSampler, TrainBatch};
use crate::harness::model::Model;
use crate::label_space::{source_space, LabelSpace};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::ParamStore;
use crate::supervision::{
    ce_loss, compute_prototypes, confidence_mask, masked_ce_loss, total_loss, ConfidenceMask,
};

/// Independent ChaCha stream for (`seed`, `tag`).
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

const PRETRAIN_LOG: &str = "pretrain_log.txt";
const TRAIN_LOG: &str = "train_log.txt";
pub const DENOISER_DIR: &str = "denoiser";
pub const TRAIN_DIR: &str = "checkpoint";

fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back to the same bits, so a
    // written log is an exact record of the run.
    format!("{v:e}")
}

fn parse_kv(line: &str, key: &str) -> Result<Option<f64>> {
    for part in line.split_whitespace() {
        if let Some(value) = part.strip_prefix(key).and_then(|r| r.strip_prefix('=')) {
            return value
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::invalid(format!("bad {key} value {value:?}")));
        }
    }
    Ok(None)
}

/// One pretraining step: `step=<n> loss=<v>`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f64,
}

/// One training step. `l2` and `kept` appear only in dual-branch modes;
/// `l2` is also absent on steps where the mask kept nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l1: f64,
    pub l2: Option<f64>,
    pub total: f64,
    pub kept: Option<f64>,
}

impl StepRecord {
    fn to_line(&self) -> String {
        let mut line = format!("step={} l1={}", self.step, fmt_f64(self.l1));
        if let Some(l2) = self.l2 {
            line.push_str(&format!(" l2={}", fmt_f64(l2)));
        }
        line.push_str(&format!(" total={}", fmt_f64(self.total)));
        if let Some(kept) = self.kept {
            line.push_str(&format!(" kept={}", fmt_f64(kept)));
        }
        line
    }

    fn parse(line: &str) -> Result<StepRecord> {
        let need = |k: &str| {
            parse_kv(line, k)?.ok_or_else(|| Error::invalid(format!("log line misses {k}: {line:?}")))
        };
        Ok(StepRecord {
            step: need("step")? as u64,
            l1: need("l1")?,
            l2: parse_kv(line, "l2")?,
            total: need("total")?,
            kept: parse_kv(line, "kept")?,
        })
    }
}

/// Append-only structured training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(StepRecord::parse(line)?);
        }
        Ok(TrainLog { records })
    }
}

pub fn write_pretrain_log(records: &[PretrainRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("step={} loss={}\n", r.step, fmt_f64(r.loss)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pretrain_log(path: &Path) -> Result<Vec<PretrainRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let step = parse_kv(line, "step")?
            .ok_or_else(|| Error::invalid(format!("log line misses step: {line:?}")))?;
        let loss = parse_kv(line, "loss")?
            .ok_or_else(|| Error::invalid(format!("log line misses loss: {line:?}")))?;
        out.push(PretrainRecord {
            step: step as u64,
            loss,
        });
    }
    Ok(out)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<PretrainRecord>,
}

/// Trains the denoiser on training-split crops and writes a denoiser
/// checkpoint under `out_dir`. With `pretrain_steps == 0` the checkpoint
/// holds the seeded initialization at step 0.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pairs = load_split(Path::new(&cfg.data.root), "train")?;
    let seed = cfg.train.seed;

    let mut store = ParamStore::new(seed);
    let net = DenoiserNet::new(&mut store, DENOISER_PREFIX, cfg.diffusion)?;
    let schedule = cfg.diffusion.schedule()?;
    let mut opt = AdamW::new(
        store.trainable(),
        AdamWConfig {
            lr: cfg.train.pretrain_lr,
            ..AdamWConfig::default()
        },
    )?;

    let mut pool_rng = stream(seed, "crop-pool");
    let sampler = CropSampler::new(
        &pairs,
        cfg.data.crop_size,
        cfg.data.crops_per_image,
        &mut pool_rng,
    )?;
    let mut rng = stream(seed, "pretrain");

    let mut records = Vec::with_capacity(cfg.train.pretrain_steps);
    for step in 1..=cfg.train.pretrain_steps as u64 {
        let picks = sampler.sample(cfg.train.batch_size, &mut rng);
        let batch = assemble_batch(&pairs, &picks, cfg.data.crop_size, store.device())?;
        let loss = ddpm_train_step(&net, &store, &mut opt, &batch.images, &schedule, &mut rng)?;
        records.push(PretrainRecord {
            step,
            loss: loss as f64,
        });
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint_dir = out_dir.join(DENOISER_DIR);
    checkpoint::save_denoiser(&checkpoint_dir, cfg, &store, cfg.train.pretrain_steps as u64)?;
    let log_path = out_dir.join(PRETRAIN_LOG);
    write_pretrain_log(&records, &log_path)?;
    Ok(PretrainOutcome {
        checkpoint_dir,
        log_path,
        records,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
    /// Denoiser fingerprints before and after the loop; equal by the
    /// frozen-prior invariant. Absent without a diffusion branch.
    pub denoiser_checksum: Option<(String, String)>,
    pub final_step: u64,
}

struct StepLosses {
    total: Tensor,
    record: StepRecord,
}

fn forward_losses(
    model: &Model,
    store: &mut ParamStore,
    batch: &TrainBatch,
    space: &LabelSpace,
    step: u64,
    extraction_noise: Option<&Tensor>,
) -> Result<StepLosses> {
    let cfg = model.config();
    let feats = model.features(store, &batch.images, extraction_noise)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f32>()? as f64) };
    match cfg.train.mode {
        AblationMode::DiffusionOnly => {
            let local = model.local_forward(store, &feats, true)?;
            let l1 = ce_loss(&local.pred, &batch.labels_up, space)?;
            let v = scalar(&l1)?;
            Ok(StepLosses {
                total: l1,
                record: StepRecord {
                    step,
                    l1: v,
                    l2: None,
                    total: v,
                    kept: None,
                },
            })
        }
        AblationMode::TransformerOnly => {
            let pred = model.global_forward(store, &batch.images, &feats, true)?;
            let l1 = ce_loss(&pred, &batch.labels_up, space)?;
            let v = scalar(&l1)?;
            Ok(StepLosses {
                total: l1,
                record: StepRecord {
                    step,
                    l1: v,
                    l2: None,
                    total: v,
                    kept: None,
                },
            })
        }
        AblationMode::Full | AblationMode::NoPcem => {
            let local = model.local_forward(store, &feats, true)?;
            let l1 = ce_loss(&local.pred, &batch.labels_up, space)?;
            let pseudo = local.pred.hard().clone();
            let (b, h, w) = pseudo.dims3()?;
            let mask = if cfg.train.mode.uses_confidence_mask() {
                let protos = compute_prototypes(&local.features, &pseudo, model.classes())?;
                confidence_mask(&local.features, &pseudo, &protos, cfg.train.tau)?
            } else {
                ConfidenceMask::full((b, h, w))
            };
            let kept = mask.kept_fraction();
            let y2 = model.global_forward(store, &batch.images, &feats, true)?;
            let l2 = masked_ce_loss(&y2, &pseudo, &mask)?;
            let total = total_loss(&l1, &l2, cfg.train.lambda)?;
            Ok(StepLosses {
                record: StepRecord {
                    step,
                    l1: scalar(&l1)?,
                    l2: l2.value().map(scalar).transpose()?,
                    total: scalar(&total)?,
                    kept: Some(kept),
                },
                total,
            })
        }
    }
}

/// Dual-branch training per the configured mode.
///
/// Fresh runs initialize from the config seed; modes with a diffusion
/// branch load the pretrained denoiser from `denoiser_dir` and freeze it.
/// `resume` continues a saved train checkpoint to `max_steps`, replaying
/// the batch stream from its recorded position.
pub fn cmd_train(
    cfg: &RunConfig,
    denoiser_dir: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.train.mode;
    let seed = cfg.train.seed;
    let crop = cfg.data.crop_size;
    let pairs = load_split(Path::new(&cfg.data.root), "train")?;

    let mut store = ParamStore::new(seed);
    let mut start_step = 0u64;
    let mut resume_meta = None;
    if let Some(dir) = resume {
        let loaded = checkpoint::load(dir, &mut store)?;
        if loaded.meta.kind != CheckpointKind::Train {
            return Err(Error::Checkpoint(
                "resume needs a train checkpoint, got a denoiser".into(),
            ));
        }
        // max_steps is the stop point, not part of the run identity, so a
        // resumed run may raise it; everything else must match.
        let mut want = loaded.config.clone();
        want.train.max_steps = cfg.train.max_steps;
        if want != *cfg {
            return Err(Error::Checkpoint(
                "resume config mismatch: the checkpoint was trained under a \
                 different config (only max_steps may change)"
                    .into(),
            ));
        }
        start_step = loaded.meta.step;
        resume_meta = Some(loaded.meta);
    } else if mode.needs_denoiser() {
        let dir = denoiser_dir.ok_or_else(|| {
            Error::Checkpoint(format!(
                "mode {mode} needs a pretrained denoiser checkpoint"
            ))
        })?;
        let loaded = checkpoint::load(dir, &mut store)?;
        checkpoint::check_prior_compat(cfg, &loaded.meta)?;
    }

    let mut model = Model::build(&mut store, cfg)?;
    model.freeze_denoiser(&mut store);
    let checksum_before = if mode.needs_denoiser() {
        Some(checkpoint::denoiser_checksum(&store)?)
    } else {
        None
    };

    // Materialize lazily created parameters (positional tables) before the
    // optimizer snapshots the trainable set.
    {
        let dummy = Tensor::zeros((1, 3, crop, crop), DType::F32, store.device())?;
        let _ = model.eval_forward(&mut store, &dummy)?;
    }

    let mut opt = AdamW::new(
        store.trainable(),
        AdamWConfig {
            lr: cfg.train.learning_rate,
            ..AdamWConfig::default()
        },
    )?;
    if let (Some(dir), Some(meta)) = (resume, &resume_meta) {
        checkpoint::load_optim(dir, &mut opt, meta)?;
    }

    let mut pool_rng = stream(seed, "crop-pool");
    let sampler = CropSampler::new(&pairs, crop, cfg.data.crops_per_image, &mut pool_rng)?;
    let mut rng = stream(seed, "train-picks");
    if let Some(meta) = &resume_meta {
        rng.set_word_pos(meta.rng_word_pos_u128()?);
    }

    let space = source_space();
    let mut log = TrainLog::default();
    let batch_size = cfg.train.batch_size;
    for step in (start_step + 1)..=(cfg.train.max_steps as u64) {
        let picks = sampler.sample(batch_size, &mut rng);
        let batch = assemble_batch(&pairs, &picks, crop, store.device())?;
        // Extraction noise comes from a stream keyed by the step index, so
        // a resumed run regenerates the same draws without extra state.
        let noise = if cfg.diffusion.stochastic_extraction && model.has_local() {
            let mut noise_rng = stream(seed, &format!("extract-noise-{step}"));
            let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
            let n = batch_size * 3 * crop * crop;
            let host: Vec<f32> = (0..n).map(|_| normal.sample(&mut noise_rng)).collect();
            Some(Tensor::from_vec(
                host,
                (batch_size, 3, crop, crop),
                store.device(),
            )?)
        } else {
            None
        };
        let losses = forward_losses(&model, &mut store, &batch, &space, step, noise.as_ref())?;
        let grads = losses.total.backward()?;
        opt.step(&grads)?;
        log.records.push(losses.record);
    }

    let denoiser_checksum = match checksum_before {
        Some(before) => {
            let after = checkpoint::denoiser_checksum(&store)?;
            if after != before {
                return Err(Error::Checkpoint(
                    "frozen denoiser parameters drifted during training".into(),
                ));
            }
            Some((before, after))
        }
        None => None,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint_dir = out_dir.join(TRAIN_DIR);
    let final_step = (cfg.train.max_steps as u64).max(start_step);
    checkpoint::save_train(
        &checkpoint_dir,
        cfg,
        &store,
        &opt,
        final_step,
        rng.get_word_pos(),
    )?;
    let log_path = out_dir.join(TRAIN_LOG);
    log.write(&log_path)?;
    Ok(TrainOutcome {
        checkpoint_dir,
        log_path,
        log,
        denoiser_checksum,
        final_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::generate_splits;

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "crossres-trainer-{tag}-{}",
            std::process::id()
        ));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        dir
    }

    /// Small enough for seconds-long tests, large enough to exercise every
    /// branch: 32-pixel crops over two 64-pixel scenes.
    fn test_config(root: &Path, mode: AblationMode, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::desk(0);
        cfg.data.root = root.to_string_lossy().into_owned();
        cfg.data.scene_height = 64;
        cfg.data.scene_width = 64;
        cfg.data.scenes_train = 2;
        cfg.data.scenes_val = 1;
        cfg.data.scenes_test = 1;
        cfg.data.num_regions = 6;
        cfg.data.crop_size = 32;
        cfg.data.crops_per_image = 8;
        cfg.diffusion.base_channels = 4;
        cfg.diffusion.scale_channels = [6, 5, 4, 3, 4];
        cfg.diffusion.time_embed_dim = 8;
        cfg.transformer.depth = 1;
        cfg.transformer.d = 16;
        cfg.transformer.heads = 2;
        cfg.fusion.fused_channels = 6;
        cfg.fusion.hierarchical_widths = [8, 7, 6, 5, 6];
        cfg.train.mode = mode;
        cfg.train.batch_size = 2;
        cfg.train.max_steps = steps;
        cfg.train.pretrain_steps = 2;
        cfg
    }

    fn prepare(tag: &str, mode: AblationMode, steps: usize) -> (PathBuf, RunConfig) {
        let dir = tempdir(tag);
        let cfg = test_config(&dir.join("data"), mode, steps);
        generate_splits(&cfg, &dir.join("data"), false).unwrap();
        (dir, cfg)
    }

    #[test]
    fn pretrain_writes_checkpoint_and_log() {
        let (dir, cfg) = prepare("pretrain", AblationMode::Full, 1);
        let out = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.loss.is_finite()));
        let read = read_pretrain_log(&out.log_path).unwrap();
        assert_eq!(read, out.records);

        let loaded = checkpoint::read_meta(&out.checkpoint_dir).unwrap();
        assert_eq!(loaded.meta.kind, CheckpointKind::Denoiser);
        assert_eq!(loaded.meta.step, 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pretrain_zero_steps_saves_initialization() {
        let (dir, mut cfg) = prepare("pretrain0", AblationMode::Full, 1);
        cfg.train.pretrain_steps = 0;
        let out = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        assert!(out.records.is_empty());
        let loaded = checkpoint::read_meta(&out.checkpoint_dir).unwrap();
        assert_eq!(loaded.meta.step, 0);

        // The saved values are exactly the seeded initialization.
        let mut fresh = ParamStore::new(cfg.train.seed);
        DenoiserNet::new(&mut fresh, DENOISER_PREFIX, cfg.diffusion).unwrap();
        let mut restored = ParamStore::new(cfg.train.seed);
        checkpoint::load(&out.checkpoint_dir, &mut restored).unwrap();
        assert_eq!(
            restored.checksum().unwrap(),
            fresh.checksum().unwrap()
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn diffusion_only_objective_is_the_label_loss() {
        let (dir, cfg) = prepare("donly", AblationMode::DiffusionOnly, 3);
        let pre = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        let out = cmd_train(&cfg, Some(&pre.checkpoint_dir), &dir.join("run"), None).unwrap();
        assert_eq!(out.log.records.len(), 3);
        for r in &out.log.records {
            assert_eq!(r.l2, None);
            assert_eq!(r.kept, None);
            assert_eq!(r.total, r.l1);
        }
        let (before, after) = out.denoiser_checksum.clone().unwrap();
        assert_eq!(before, after);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn no_pcem_keeps_every_pixel() {
        let (dir, cfg) = prepare("nopcem", AblationMode::NoPcem, 3);
        let pre = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        let out = cmd_train(&cfg, Some(&pre.checkpoint_dir), &dir.join("run"), None).unwrap();
        for r in &out.log.records {
            assert_eq!(r.kept, Some(1.0));
            assert!(r.l2.is_some());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn transformer_only_needs_no_denoiser() {
        let (dir, cfg) = prepare("tonly", AblationMode::TransformerOnly, 2);
        let out = cmd_train(&cfg, None, &dir.join("run"), None).unwrap();
        assert_eq!(out.log.records.len(), 2);
        assert!(out.denoiser_checksum.is_none());
        for r in &out.log.records {
            assert_eq!(r.l2, None);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn full_mode_logs_mask_fractions_and_mixes_losses() {
        let (dir, cfg) = prepare("full", AblationMode::Full, 3);
        let pre = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        let out = cmd_train(&cfg, Some(&pre.checkpoint_dir), &dir.join("run"), None).unwrap();
        for r in &out.log.records {
            let kept = r.kept.expect("full mode records mask stats");
            assert!((0.0..=1.0).contains(&kept));
            match r.l2 {
                Some(l2) => {
                    let want = 0.5 * r.l1 + 0.5 * l2;
                    assert!(
                        (r.total - want).abs() <= 1e-6 * (1.0 + want.abs()),
                        "total {} vs mixed {want}",
                        r.total
                    );
                }
                None => assert_eq!(kept, 0.0),
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn training_without_the_denoiser_checkpoint_is_refused() {
        let (dir, cfg) = prepare("missing", AblationMode::Full, 1);
        let err = cmd_train(&cfg, None, &dir.join("run"), None).unwrap_err();
        assert!(err.to_string().contains("pretrained denoiser"), "got: {err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn incompatible_prior_is_refused() {
        let (dir, cfg) = prepare("mismatch", AblationMode::Full, 1);
        let pre = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        let mut other = cfg.clone();
        other.diffusion.beta_end = 0.04;
        let err = cmd_train(&other, Some(&pre.checkpoint_dir), &dir.join("run2"), None)
            .unwrap_err();
        assert!(err.to_string().contains("prior hash"), "got: {err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_matches_a_continuous_run() {
        let (dir, cfg) = prepare("resume", AblationMode::Full, 4);
        let pre = cmd_pretrain(&cfg, &dir.join("run")).unwrap();
        let cont = cmd_train(&cfg, Some(&pre.checkpoint_dir), &dir.join("cont"), None).unwrap();

        let mut short = cfg.clone();
        short.train.max_steps = 2;
        let part = cmd_train(&short, Some(&pre.checkpoint_dir), &dir.join("part"), None).unwrap();
        assert_eq!(part.final_step, 2);
        // Identical computation prefix: records match exactly.
        for (a, b) in part.log.records.iter().zip(&cont.log.records) {
            assert_eq!(a, b);
        }

        let resumed =
            cmd_train(&cfg, None, &dir.join("resumed"), Some(&part.checkpoint_dir)).unwrap();
        assert_eq!(resumed.final_step, 4);
        assert_eq!(resumed.log.records.len(), 2);
        for (r, c) in resumed.log.records.iter().zip(&cont.log.records[2..]) {
            assert_eq!(r.step, c.step);
            let tol = 1e-6 * (1.0 + c.total.abs());
            assert!(
                (r.total - c.total).abs() <= tol,
                "step {}: resumed {} vs continuous {}",
                r.step,
                r.total,
                c.total
            );
            assert!((r.l1 - c.l1).abs() <= tol);
        }

        let mut other = cfg.clone();
        other.train.lambda = 0.25;
        let err =
            cmd_train(&other, None, &dir.join("bad"), Some(&part.checkpoint_dir)).unwrap_err();
        assert!(err.to_string().contains("resume config mismatch"), "got: {err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
