//! On-disk datasets of scene pairs.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/manifest            one line per scene (see below)
//! root/<id>/image.npy            f32, H x W x 3
//! root/<id>/hr_labels.npy        u16, H x W
//! root/<id>/lr_labels.npy        u16, (H/R) x (W/R)
//! root/<id>/corruption_mask.npy  bool, (H/R) x (W/R)
//! ```
//!
//! Manifest lines are `id=<n> seed=<n> height=<n> width=<n> factor=<n>
//! mpp=<f>` in scene order. The npy container is lossless for these dtypes,
//! so `read_dataset(write_dataset(x)) == x` holds bit for bit; `mpp` is
//! printed with enough digits to round-trip an f64.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use ndarray_npy::{read_npy, write_npy};

use crate::error::{Error, Result};
use crate::grid::{ImageRaster, Raster};
use crate::synthdata::ScenePair;

struct ManifestEntry {
    id: usize,
    seed: u64,
    height: usize,
    width: usize,
    factor: usize,
    meters_per_pixel: f64,
}

fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join(id.to_string())
}

/// Writes `pairs` under `root`, creating it if needed. Existing files are
/// overwritten; the manifest is written last so a torn write cannot look
/// like a complete dataset.
pub fn write_dataset(pairs: &[ScenePair], root: &Path) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for (id, pair) in pairs.iter().enumerate() {
        let dir = scene_dir(root, id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let npy = |name: &str| dir.join(name);
        write_npy(npy("image.npy"), pair.image.data())
            .map_err(|e| Error::dataset(npy("image.npy"), e.to_string()))?;
        write_npy(npy("hr_labels.npy"), pair.hr_labels.data())
            .map_err(|e| Error::dataset(npy("hr_labels.npy"), e.to_string()))?;
        write_npy(npy("lr_labels.npy"), pair.lr_labels.data())
            .map_err(|e| Error::dataset(npy("lr_labels.npy"), e.to_string()))?;
        write_npy(npy("corruption_mask.npy"), pair.corruption_mask.data())
            .map_err(|e| Error::dataset(npy("corruption_mask.npy"), e.to_string()))?;
        writeln!(
            manifest,
            "id={id} seed={} height={} width={} factor={} mpp={:?}",
            pair.seed,
            pair.hr_labels.height(),
            pair.hr_labels.width(),
            pair.factor,
            pair.image.meters_per_pixel,
        )
        .expect("writing to a String cannot fail");
    }
    let manifest_path = root.join("manifest");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

fn parse_manifest_line(line: &str, path: &Path, lineno: usize) -> Result<ManifestEntry> {
    let mut fields: std::collections::BTreeMap<&str, &str> = Default::default();
    for token in line.split_whitespace() {
        let (k, v) = token.split_once('=').ok_or_else(|| {
            Error::dataset(
                path,
                format!("manifest line {lineno}: token {token:?} is not key=value"),
            )
        })?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields.get(k).copied().ok_or_else(|| {
            Error::dataset(path, format!("manifest line {lineno}: missing field {k}"))
        })
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| {
            Error::dataset(path, format!("manifest line {lineno}: bad integer for {k}"))
        })
    };
    Ok(ManifestEntry {
        id: parse_usize("id")?,
        seed: get("seed")?.parse().map_err(|_| {
            Error::dataset(path, format!("manifest line {lineno}: bad integer for seed"))
        })?,
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        factor: parse_usize("factor")?,
        meters_per_pixel: get("mpp")?.parse().map_err(|_| {
            Error::dataset(path, format!("manifest line {lineno}: bad float for mpp"))
        })?,
    })
}

fn read_array2<T: ndarray_npy::ReadableElement>(
    path: &Path,
    expect: (usize, usize),
) -> Result<Array2<T>> {
    let arr: Array2<T> = read_npy(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    if arr.dim() != expect {
        return Err(Error::dataset(
            path,
            format!("shape {:?} does not match manifest {:?}", arr.dim(), expect),
        ));
    }
    Ok(arr)
}

/// Reads a dataset written by [`write_dataset`], validating every file's
/// shape against the manifest. Errors name the offending file.
pub fn read_dataset(root: &Path) -> Result<Vec<ScenePair>> {
    let manifest_path = root.join("manifest");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let entry = parse_manifest_line(line, &manifest_path, i + 1)?;
        if entry.id != i {
            return Err(Error::dataset(
                &manifest_path,
                format!("manifest line {}: id {} out of order", i + 1, entry.id),
            ));
        }
        if entry.factor == 0 || entry.height % entry.factor != 0 || entry.width % entry.factor != 0
        {
            return Err(Error::dataset(
                &manifest_path,
                format!(
                    "manifest line {}: grid {}x{} not divisible by factor {}",
                    i + 1,
                    entry.height,
                    entry.width,
                    entry.factor
                ),
            ));
        }
        let dir = scene_dir(root, entry.id);
        let image_path = dir.join("image.npy");
        let image: Array3<f32> =
            read_npy(&image_path).map_err(|e| Error::dataset(&image_path, e.to_string()))?;
        if image.dim() != (entry.height, entry.width, 3) {
            return Err(Error::dataset(
                &image_path,
                format!(
                    "shape {:?} does not match manifest {:?}",
                    image.dim(),
                    (entry.height, entry.width, 3)
                ),
            ));
        }
        let hr: Array2<u16> =
            read_array2(&dir.join("hr_labels.npy"), (entry.height, entry.width))?;
        let lr_shape = (entry.height / entry.factor, entry.width / entry.factor);
        let lr: Array2<u16> = read_array2(&dir.join("lr_labels.npy"), lr_shape)?;
        let mask: Array2<bool> = read_array2(&dir.join("corruption_mask.npy"), lr_shape)?;
        let mpp = entry.meters_per_pixel;
        let lr_mpp = mpp * entry.factor as f64;
        pairs.push(ScenePair::new(
            ImageRaster::new(image, mpp),
            Raster::new(hr, mpp),
            Raster::new(lr, lr_mpp),
            Raster::new(mask, lr_mpp),
            entry.factor,
            entry.seed,
        )?);
    }
    if pairs.is_empty() {
        return Err(Error::dataset(&manifest_path, "manifest has no entries"));
    }
    Ok(pairs)
}
