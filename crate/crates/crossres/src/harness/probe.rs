//! Measures what the confidence mask actually selects. The supervision in
//! the low-resolution labels is partly corrupted at generation time, and
//! the mask is only useful if the pixels it keeps sit on clean cells more
//! often than chance. This replays the trained model's confidence path
//! over the training crop pool and scores every high-resolution pixel by
//! the corruption flag of the label cell underneath it.

use std::path::Path;

use candle_core::Device;

use crate::error::{Error, Result};
use crate::harness::data::{assemble_batch, load_split, CropSampler};
use crate::harness::predict::load_predictor;
use crate::harness::trainer::stream;
use crate::supervision::{compute_prototypes, confidence_mask};

#[derive(Debug, Clone, Copy)]
pub struct MaskCleanRates {
    /// Fraction of kept pixels whose label cell survived corruption.
    pub kept_clean_rate: f64,
    /// Same fraction over every pixel, kept or not.
    pub overall_clean_rate: f64,
    /// Fraction of pixels the mask kept.
    pub kept_fraction: f64,
}

/// Runs the confidence path of the checkpoint under `dir` over its own
/// training crop pool, deterministically: the pool is rebuilt from the
/// checkpoint's seed and extraction runs without noise. Only modes that
/// train under a confidence mask are accepted.
pub fn mask_clean_rates(dir: &Path) -> Result<MaskCleanRates> {
    let (mut store, model) = load_predictor(dir)?.into_parts();
    let cfg = model.config().clone();
    if !cfg.train.mode.uses_confidence_mask() {
        return Err(Error::invalid(format!(
            "mode {} never computes a confidence mask",
            cfg.train.mode.name()
        )));
    }
    let pairs = load_split(Path::new(&cfg.data.root), "train")?;
    let mut pool_rng = stream(cfg.train.seed, "crop-pool");
    let sampler = CropSampler::new(
        &pairs,
        cfg.data.crop_size,
        cfg.data.crops_per_image,
        &mut pool_rng,
    )?;
    let device = Device::Cpu;
    let f = cfg.data.factor;
    let (mut kept_clean, mut kept_n) = (0u64, 0u64);
    let (mut all_clean, mut all_n) = (0u64, 0u64);
    for chunk in sampler.pool().chunks(cfg.train.batch_size) {
        let batch = assemble_batch(&pairs, chunk, sampler.crop(), &device)?;
        let feats = model.features(&store, &batch.images, None)?;
        let local = model.local_forward(&mut store, &feats, false)?;
        let pseudo = local.pred.hard().clone();
        let protos = compute_prototypes(&local.features, &pseudo, model.classes())?;
        let mask = confidence_mask(&local.features, &pseudo, &protos, cfg.train.tau)?;
        let (b, h, w) = mask.dims();
        let values = mask.values();
        for i in 0..b {
            let corr = batch.corruption[i].data();
            for r in 0..h {
                for c in 0..w {
                    let clean = !corr[(r / f, c / f)] as u64;
                    all_n += 1;
                    all_clean += clean;
                    if values[(i * h + r) * w + c] {
                        kept_n += 1;
                        kept_clean += clean;
                    }
                }
            }
        }
    }
    if kept_n == 0 {
        return Err(Error::invalid(
            "confidence mask kept no pixels on the training pool",
        ));
    }
    Ok(MaskCleanRates {
        kept_clean_rate: kept_clean as f64 / kept_n as f64,
        overall_clean_rate: all_clean as f64 / all_n as f64,
        kept_fraction: kept_n as f64 / all_n as f64,
    })
}
