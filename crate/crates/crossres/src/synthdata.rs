//! Synthetic cross-resolution benchmark scenes.
//!
//! A scene is a seeded Voronoi partition of the grid into target-space
//! classes, rendered to a color image, paired with a degraded low-resolution
//! label grid in the source space. The degradation pipeline (rigid shift,
//! block-majority downsampling, class splitting, random flips) emulates the
//! resolution and noise mismatch between meter-scale imagery and coarse
//! land-cover labels. Every low-res pixel whose unified label disagrees with
//! the clean downsample is recorded in a corruption mask, so confidence
//! estimators can be scored against known label errors.
//!
//! All randomness flows through [`rand_chacha::ChaCha8Rng`] seeded from the
//! caller's integers; grids are visited in row-major order, so outputs are a
//! pure function of their inputs.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{expect_same_shape, ImageRaster, Raster};
use crate::label_space::{LabelSpace, UnificationTable};

/// Render colors for the four target classes, in class-id order. Every pair
/// differs by at least 0.3 in some channel, so classes stay separable from
/// imagery even under moderate texture noise.
pub const CLASS_COLORS: [[f32; 3]; 4] = [
    [0.85, 0.15, 0.15], // Built-up
    [0.10, 0.55, 0.10], // Tree canopy
    [0.55, 0.95, 0.35], // Low vegetation
    [0.15, 0.25, 0.90], // Water
];

/// Recipe for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Voronoi region count; regions are assigned classes independently.
    pub num_regions: usize,
    pub target_space: LabelSpace,
    /// Std-dev of zero-mean Gaussian noise added per channel, in [0, 1].
    pub texture_noise_sigma: f32,
    pub meters_per_pixel: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_regions < 2 {
            return Err(Error::invalid("scene needs at least 2 regions"));
        }
        if !(0.0..=1.0).contains(&self.texture_noise_sigma) {
            return Err(Error::invalid(format!(
                "texture_noise_sigma must be in [0, 1], got {}",
                self.texture_noise_sigma
            )));
        }
        if self.target_space.is_empty() {
            return Err(Error::invalid("target space has no classes"));
        }
        if self.target_space.len() > CLASS_COLORS.len() {
            return Err(Error::invalid(format!(
                "render palette supports {} classes, target space has {}",
                CLASS_COLORS.len(),
                self.target_space.len()
            )));
        }
        if !(self.meters_per_pixel.is_finite() && self.meters_per_pixel > 0.0) {
            return Err(Error::invalid("meters_per_pixel must be positive"));
        }
        Ok(())
    }
}

/// Label degradation parameters.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    /// Per-pixel probability of replacing the source label with a uniformly
    /// chosen different source class. Must be < 1.
    pub flip_rate: f64,
    /// Rigid down-right shift, in high-res pixels, applied to the labels
    /// before downsampling (edge-replicated).
    pub boundary_shift: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.flip_rate) {
            return Err(Error::invalid(format!(
                "flip_rate must be in [0, 1), got {}",
                self.flip_rate
            )));
        }
        Ok(())
    }

    /// No shift, no flips.
    pub fn clean(seed: u64) -> Self {
        Self {
            flip_rate: 0.0,
            boundary_shift: 0,
            seed,
        }
    }
}

/// One benchmark sample: image and ground truth at full resolution, training
/// labels at 1/R resolution in the source space, and the record of which
/// low-res pixels carry a wrong (unified) label.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub image: ImageRaster,
    /// Target-space ground truth, same grid as `image`.
    pub hr_labels: Raster<u16>,
    /// Source-space supervision on the (H/R, W/R) grid.
    pub lr_labels: Raster<u16>,
    /// True where `unify(lr_labels)` disagrees with the clean block-majority
    /// downsample of `hr_labels`.
    pub corruption_mask: Raster<bool>,
    pub factor: usize,
    pub seed: u64,
}

impl ScenePair {
    pub fn new(
        image: ImageRaster,
        hr_labels: Raster<u16>,
        lr_labels: Raster<u16>,
        corruption_mask: Raster<bool>,
        factor: usize,
        seed: u64,
    ) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("resolution factor must be >= 1"));
        }
        let (h, w) = hr_labels.shape();
        if image.height() != h || image.width() != w {
            return Err(Error::shape(format!(
                "image {}x{} vs hr_labels {h}x{w}",
                image.height(),
                image.width()
            )));
        }
        if image.channels() != 3 {
            return Err(Error::shape(format!(
                "image must have 3 channels, got {}",
                image.channels()
            )));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "hr grid {h}x{w} is not divisible by factor {factor}"
            )));
        }
        if lr_labels.shape() != (h / factor, w / factor) {
            return Err(Error::shape(format!(
                "lr_labels {:?} vs expected {:?}",
                lr_labels.shape(),
                (h / factor, w / factor)
            )));
        }
        expect_same_shape(&lr_labels, &corruption_mask, "lr_labels vs corruption_mask")?;
        Ok(Self {
            image,
            hr_labels,
            lr_labels,
            corruption_mask,
            factor,
            seed,
        })
    }
}

const MAX_SCENE_ATTEMPTS: usize = 10_000;

/// Generates a Voronoi scene and its rendering.
///
/// Region sites and classes are redrawn until the label grid contains at
/// least `min(num_regions, |classes|)` distinct classes, so small scenes
/// cannot silently drop a class. Nearest-site ties go to the lowest site
/// index. With `texture_noise_sigma == 0` the image holds exact base colors.
pub fn generate_scene(spec: &SceneSpec) -> Result<(ImageRaster, Raster<u16>)> {
    spec.validate()?;
    let classes = spec.target_space.class_ids();
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let needed = spec.num_regions.min(classes.len());

    let mut labels = Array2::<u16>::zeros((h, w));
    let mut found = false;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let sites: Vec<(f64, f64, u16)> = (0..spec.num_regions)
            .map(|_| {
                let r = rng.random_range(0..h) as f64;
                let c = rng.random_range(0..w) as f64;
                let class = classes[rng.random_range(0..classes.len())];
                (r, c, class)
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let (rf, cf) = (r as f64, c as f64);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, &(sr, sc, _)) in sites.iter().enumerate() {
                    let d = (rf - sr) * (rf - sr) + (cf - sc) * (cf - sc);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                labels[[r, c]] = sites[best].2;
            }
        }
        let mut present: Vec<u16> = labels.iter().copied().collect();
        present.sort_unstable();
        present.dedup();
        if present.len() >= needed {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::invalid(format!(
            "could not draw a scene with {needed} distinct classes in {MAX_SCENE_ATTEMPTS} attempts"
        )));
    }

    let color_of: BTreeMap<u16, [f32; 3]> = classes
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, CLASS_COLORS[i]))
        .collect();
    let mut image = ImageRaster::zeros(h, w, 3, spec.meters_per_pixel);
    let normal = Normal::new(0.0f32, 1.0f32).expect("unit normal");
    for r in 0..h {
        for c in 0..w {
            let base = color_of[&labels[[r, c]]];
            for (ch, &b) in base.iter().enumerate() {
                let mut v = b;
                if spec.texture_noise_sigma > 0.0 {
                    v += spec.texture_noise_sigma * normal.sample(&mut rng);
                }
                image.data_mut()[[r, c, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((image, Raster::new(labels, spec.meters_per_pixel)))
}

/// Reduces resolution by `factor`, assigning each output pixel the most
/// frequent class in its block. Ties break toward the lowest class id;
/// no-data (id 0) pixels are excluded from the vote, and an all-no-data
/// block stays no-data.
pub fn block_majority_downsample(labels: &Raster<u16>, factor: usize) -> Result<Raster<u16>> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    let (h, w) = labels.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "grid {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<u16>::zeros((oh, ow));
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for br in 0..oh {
        for bc in 0..ow {
            counts.clear();
            for r in br * factor..(br + 1) * factor {
                for c in bc * factor..(bc + 1) * factor {
                    let v = labels.data()[[r, c]];
                    if v != 0 {
                        *counts.entry(v).or_insert(0) += 1;
                    }
                }
            }
            // Ascending-key iteration makes the first maximum the lowest id.
            let mut winner = 0u16;
            let mut best = 0usize;
            for (&id, &n) in counts.iter() {
                if n > best {
                    best = n;
                    winner = id;
                }
            }
            out[[br, bc]] = winner;
        }
    }
    Ok(Raster::new(out, labels.meters_per_pixel * factor as f64))
}

/// Replaces each target-space label with a uniformly sampled member of its
/// preimage under `table`, producing a source-space grid. No-data passes
/// through. Pixels are visited row-major; each non-ignore pixel consumes
/// exactly one draw.
pub fn inverse_unify(
    target_labels: &Raster<u16>,
    table: &UnificationTable,
    seed: u64,
) -> Result<Raster<u16>> {
    let mut preimages: BTreeMap<u16, Vec<u16>> = BTreeMap::new();
    for &tid in table.target().class_ids() {
        let pre = table.preimage(tid);
        if pre.is_empty() {
            return Err(Error::invalid(format!(
                "target class {tid} has an empty preimage"
            )));
        }
        preimages.insert(tid, pre);
    }
    let dst_ignore = table.target().ignore_id();
    let src_ignore = table.source().ignore_id().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = target_labels.data().clone();
    for ((row, col), v) in target_labels.data().indexed_iter() {
        if Some(*v) == dst_ignore {
            out[[row, col]] = src_ignore;
            continue;
        }
        let pre = preimages.get(v).ok_or(Error::LabelOutOfSpace {
            value: *v,
            row,
            col,
            space: table.target().name().to_string(),
        })?;
        out[[row, col]] = pre[rng.random_range(0..pre.len())];
    }
    Ok(Raster::new(out, target_labels.meters_per_pixel))
}

/// Rigid down-right shift by `s` pixels with edge replication.
fn shift_labels(labels: &Raster<u16>, s: usize) -> Raster<u16> {
    if s == 0 {
        return labels.clone();
    }
    let (h, w) = labels.shape();
    let mut out = Array2::<u16>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = labels.data()[[r.saturating_sub(s), c.saturating_sub(s)]];
        }
    }
    Raster::new(out, labels.meters_per_pixel)
}

/// Flips each non-ignore pixel to a uniformly chosen *different* class of
/// `space` with probability `flip_rate`. Row-major; each non-ignore pixel
/// consumes one Bernoulli draw plus, when flipped, one class draw.
pub fn apply_flips(
    labels: &Raster<u16>,
    flip_rate: f64,
    space: &LabelSpace,
    seed: u64,
) -> Result<Raster<u16>> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::invalid(format!(
            "flip_rate must be in [0, 1), got {flip_rate}"
        )));
    }
    let ids = space.class_ids();
    if ids.len() < 2 {
        return Err(Error::invalid("flipping needs at least 2 classes"));
    }
    let ignore = space.ignore_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.data().clone();
    for ((row, col), v) in labels.data().indexed_iter() {
        if Some(*v) == ignore {
            continue;
        }
        let cur = ids.iter().position(|&i| i == *v).ok_or(Error::LabelOutOfSpace {
            value: *v,
            row,
            col,
            space: space.name().to_string(),
        })?;
        if flip_rate > 0.0 && rng.random_bool(flip_rate) {
            let k = rng.random_range(0..ids.len() - 1);
            let pick = if k < cur { k } else { k + 1 };
            out[[row, col]] = ids[pick];
        }
    }
    Ok(Raster::new(out, labels.meters_per_pixel))
}

/// Marks low-res pixels whose unified label disagrees with the clean
/// target-space downsample. Flips that stay within the same unification
/// group are invisible here by construction.
pub fn compute_corruption_mask(
    lr_labels: &Raster<u16>,
    clean_target: &Raster<u16>,
    table: &UnificationTable,
) -> Result<Raster<bool>> {
    expect_same_shape(lr_labels, clean_target, "lr_labels vs clean downsample")?;
    let unified = table.unify(lr_labels)?;
    let mask = ndarray::Zip::from(unified.data())
        .and(clean_target.data())
        .map_collect(|&a, &b| a != b);
    Ok(Raster::new(mask, lr_labels.meters_per_pixel))
}

/// Full degradation pipeline: shift, block-majority downsample, split into
/// source classes, flip. The corruption mask compares the result against the
/// clean (unshifted, unflipped) downsample.
pub fn degrade_labels(
    hr_labels: &Raster<u16>,
    factor: usize,
    noise: &NoiseModel,
    table: &UnificationTable,
) -> Result<(Raster<u16>, Raster<bool>)> {
    noise.validate()?;
    let clean = block_majority_downsample(hr_labels, factor)?;
    let shifted = shift_labels(hr_labels, noise.boundary_shift);
    let down = block_majority_downsample(&shifted, factor)?;
    let mut seeder = ChaCha8Rng::seed_from_u64(noise.seed);
    let split_seed = seeder.next_u64();
    let flip_seed = seeder.next_u64();
    let split = inverse_unify(&down, table, split_seed)?;
    let lr_labels = apply_flips(&split, noise.flip_rate, table.source(), flip_seed)?;
    let mask = compute_corruption_mask(&lr_labels, &clean, table)?;
    Ok((lr_labels, mask))
}

/// Generates one complete benchmark sample.
pub fn make_scene_pair(
    spec: &SceneSpec,
    factor: usize,
    noise: &NoiseModel,
    table: &UnificationTable,
) -> Result<ScenePair> {
    let (image, hr_labels) = generate_scene(spec)?;
    let (lr_labels, corruption_mask) = degrade_labels(&hr_labels, factor, noise, table)?;
    ScenePair::new(image, hr_labels, lr_labels, corruption_mask, factor, spec.seed)
}
