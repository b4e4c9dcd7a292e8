//! Benchmark generation and training-crop sampling.
//!
//! The dataset is a pure function of the `[data]` config section: scene
//! seeds come from disjoint per-split ranges, so the benchmark stays fixed
//! while training seeds vary. Label degradation draws from a stream offset
//! far from the scene-geometry streams.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::label_space::{default_table, target_space};
use crate::supervision::{label_batch, resize_ids_nearest};
use crate::synthdata::{make_scene_pair, NoiseModel, ScenePair, SceneSpec};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_seed_base(split: &str) -> u64 {
    match split {
        "train" => 1_000_000,
        "val" => 2_000_000,
        "test" => 3_000_000,
        other => unreachable!("unknown split {other}"),
    }
}

/// Degradation streams live far above every scene-seed range so label noise
/// never replays a geometry stream.
const NOISE_STREAM_OFFSET: u64 = 10_000_000;

fn split_count(cfg: &RunConfig, split: &str) -> usize {
    match split {
        "train" => cfg.data.scenes_train,
        "val" => cfg.data.scenes_val,
        "test" => cfg.data.scenes_test,
        other => unreachable!("unknown split {other}"),
    }
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub root: PathBuf,
    /// (split, scene count) in split order.
    pub scenes: Vec<(String, usize)>,
    pub fingerprint: String,
}

/// Writes the three splits under `root`. Existing split directories are
/// refused unless `force` is set.
pub fn generate_splits(cfg: &RunConfig, root: &Path, force: bool) -> Result<GenerateSummary> {
    cfg.validate()?;
    for split in SPLITS {
        let dir = split_dir(root, split);
        if dir.exists() && !force {
            return Err(Error::invalid(format!(
                "{} already exists (use force to overwrite)",
                dir.display()
            )));
        }
    }
    let table = default_table();
    let mut scenes = Vec::new();
    for split in SPLITS {
        let n = split_count(cfg, split);
        let base = split_seed_base(split);
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let seed = base + i as u64;
            let spec = SceneSpec {
                height: cfg.data.scene_height,
                width: cfg.data.scene_width,
                num_regions: cfg.data.num_regions,
                target_space: target_space(),
                texture_noise_sigma: cfg.data.texture_noise_sigma,
                meters_per_pixel: cfg.data.meters_per_pixel,
                seed,
            };
            let noise = NoiseModel {
                flip_rate: cfg.data.flip_rate,
                boundary_shift: cfg.data.boundary_shift,
                seed: seed + NOISE_STREAM_OFFSET,
            };
            pairs.push(make_scene_pair(&spec, cfg.data.factor, &noise, &table)?);
        }
        let dir = split_dir(root, split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_dataset(&pairs, &dir)?;
        scenes.push((split.to_string(), n));
    }
    Ok(GenerateSummary {
        root: root.to_path_buf(),
        scenes,
        fingerprint: dataset_fingerprint(root)?,
    })
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<ScenePair>> {
    read_dataset(&split_dir(root, split))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("path under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// SHA-256 over every file under `root`: sorted relative paths, each
/// followed by its length and bytes. Identifies a dataset regardless of
/// where it lives.
pub fn dataset_fingerprint(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::dataset(root, "no files to fingerprint"));
    }
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let bytes = std::fs::read(root.join(rel)).map_err(|e| Error::io(root.join(rel), e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// One training window: a scene index and the top-left corner of a
/// factor-aligned `crop x crop` region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPick {
    pub scene: usize,
    pub row: usize,
    pub col: usize,
}

/// Fixed pool of crop windows, `crops_per_image` per scene.
///
/// The pool is drawn once from its own stream; training then picks from it
/// with replacement, so resuming a run only needs the picker stream's
/// position, not any epoch bookkeeping.
pub struct CropSampler {
    picks: Vec<CropPick>,
    crop: usize,
}

impl CropSampler {
    pub fn new(
        pairs: &[ScenePair],
        crop: usize,
        crops_per_image: usize,
        pool_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no scenes to sample crops from"));
        }
        if crop == 0 || crops_per_image == 0 {
            return Err(Error::invalid("crop size and crops_per_image must be >= 1"));
        }
        let mut picks = Vec::with_capacity(pairs.len() * crops_per_image);
        for (scene, pair) in pairs.iter().enumerate() {
            let (h, w) = pair.hr_labels.shape();
            let f = pair.factor;
            if crop > h || crop > w {
                return Err(Error::invalid(format!(
                    "crop {crop} exceeds scene {scene} of {h}x{w}"
                )));
            }
            if !crop.is_multiple_of(f) {
                return Err(Error::invalid(format!(
                    "crop {crop} is not divisible by scene {scene}'s factor {f}"
                )));
            }
            for _ in 0..crops_per_image {
                let row = pool_rng.random_range(0..=(h - crop) / f) * f;
                let col = pool_rng.random_range(0..=(w - crop) / f) * f;
                picks.push(CropPick { scene, row, col });
            }
        }
        Ok(Self { picks, crop })
    }

    pub fn pool(&self) -> &[CropPick] {
        &self.picks
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// `n` picks with replacement; each pick costs exactly one draw from
    /// `rng`, keeping the stream position a complete sampler state.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<CropPick> {
        (0..n)
            .map(|_| self.picks[rng.random_range(0..self.picks.len())])
            .collect()
    }
}

/// One assembled training batch.
pub struct TrainBatch {
    /// (B, 3, crop, crop) f32 in [-1, 1], the diffusion input convention.
    pub images: Tensor,
    /// (B, crop, crop) u32 source-space ids: the low-resolution supervision
    /// replicated up to image resolution.
    pub labels_up: Tensor,
    /// The low-resolution label crops backing `labels_up`.
    pub lr_labels: Vec<Raster<u16>>,
    /// Corruption flags aligned with `lr_labels`.
    pub corruption: Vec<Raster<bool>>,
}

/// Cuts windows out of the scenes and stacks them. Images are mapped from
/// [0, 1] to [-1, 1]; labels are replicated blockwise to image resolution.
pub fn assemble_batch(
    pairs: &[ScenePair],
    picks: &[CropPick],
    crop: usize,
    device: &Device,
) -> Result<TrainBatch> {
    if picks.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = picks.len();
    let mut image_data = Vec::with_capacity(n * 3 * crop * crop);
    let mut lr_labels = Vec::with_capacity(n);
    let mut corruption = Vec::with_capacity(n);
    let mut ups = Vec::with_capacity(n);
    for pick in picks {
        let pair = pairs.get(pick.scene).ok_or_else(|| {
            Error::invalid(format!("pick references scene {}", pick.scene))
        })?;
        let img = pair.image.data();
        for c in 0..3 {
            for y in 0..crop {
                for x in 0..crop {
                    image_data.push(img[(pick.row + y, pick.col + x, c)] * 2.0 - 1.0);
                }
            }
        }
        let f = pair.factor;
        let (r0, c0) = (pick.row / f, pick.col / f);
        let (rn, cn) = (crop / f, crop / f);
        let lr = pair
            .lr_labels
            .data()
            .slice(s![r0..r0 + rn, c0..c0 + cn])
            .to_owned();
        let lr = Raster::new(lr, pair.lr_labels.meters_per_pixel);
        ups.push(resize_ids_nearest(&lr, crop, crop)?);
        lr_labels.push(lr);
        let corr = pair
            .corruption_mask
            .data()
            .slice(s![r0..r0 + rn, c0..c0 + cn])
            .to_owned();
        corruption.push(Raster::new(corr, pair.corruption_mask.meters_per_pixel));
    }
    let images = Tensor::from_vec(image_data, (n, 3, crop, crop), device)?;
    let up_refs: Vec<&Raster<u16>> = ups.iter().collect();
    let labels_up = label_batch(&up_refs, device)?;
    Ok(TrainBatch {
        images,
        labels_up,
        lr_labels,
        corruption,
    })
}
