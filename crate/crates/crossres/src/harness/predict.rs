//! Sliding-window inference and target-space evaluation.
//!
//! Scenes larger than the training crop are tiled into crop-size windows
//! with 50% overlap; overlapping probabilities are averaged before the
//! argmax, so window seams cannot show up in the labels. Model outputs
//! live in the fine-grained source space and are unified to the four-class
//! target space, which is the space every report is scored in.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use ndarray_npy::{read_npy, write_npy};

use crate::checkpoint::{self, CheckpointKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{iou_report, ConfusionMatrix, IoUReport};
use crate::grid::{ImageRaster, Raster};
use crate::harness::data::load_split;
use crate::harness::model::Model;
use crate::label_space::{default_table, source_space, target_space};
use crate::nn::params::ParamStore;
use crate::synthdata::ScenePair;

/// Window origins covering `[0, dim)`: multiples of `crop / 2` while a full
/// window still has room past them, then one flush with the end.
fn window_starts(dim: usize, crop: usize) -> Vec<usize> {
    if dim <= crop {
        return vec![0];
    }
    let stride = (crop / 2).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + crop < dim)
        .collect();
    starts.push(dim - crop);
    starts
}

/// Accumulates per-window class probabilities into a scene-sized mean.
/// Sums run in f64 so deep overlap stacks do not lose precision.
struct ProbComposer {
    classes: usize,
    h: usize,
    w: usize,
    acc: Vec<f64>,
    hits: Vec<u32>,
}

impl ProbComposer {
    fn new(classes: usize, h: usize, w: usize) -> Self {
        Self {
            classes,
            h,
            w,
            acc: vec![0.0; classes * h * w],
            hits: vec![0; h * w],
        }
    }

    /// Adds one `classes x crop x crop` window at offset (`r0`, `c0`).
    fn add(&mut self, r0: usize, c0: usize, crop: usize, probs: &[f32]) {
        assert_eq!(probs.len(), self.classes * crop * crop);
        assert!(r0 + crop <= self.h && c0 + crop <= self.w);
        for ch in 0..self.classes {
            for r in 0..crop {
                for c in 0..crop {
                    self.acc[(ch * self.h + r0 + r) * self.w + c0 + c] +=
                        probs[(ch * crop + r) * crop + c] as f64;
                }
            }
        }
        for r in 0..crop {
            for c in 0..crop {
                self.hits[(r0 + r) * self.w + c0 + c] += 1;
            }
        }
    }

    fn mean(self) -> Result<Array3<f32>> {
        if self.hits.contains(&0) {
            return Err(Error::invalid("tiling left pixels uncovered"));
        }
        Ok(Array3::from_shape_fn(
            (self.classes, self.h, self.w),
            |(ch, r, c)| {
                (self.acc[(ch * self.h + r) * self.w + c] / self.hits[r * self.w + c] as f64)
                    as f32
            },
        ))
    }
}

/// Argmax over source channels (ties to the lowest channel), then
/// unification to target ids.
fn labels_from_probs(mean: &Array3<f32>, meters_per_pixel: f64) -> Result<Raster<u16>> {
    let (classes, h, w) = mean.dim();
    let space = source_space();
    if classes != space.len() {
        return Err(Error::shape(format!(
            "{classes} probability channels for a {}-class space",
            space.len()
        )));
    }
    let mut out = Array2::<u16>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            for ch in 1..classes {
                if mean[(ch, r, c)] > mean[(best, r, c)] {
                    best = ch;
                }
            }
            out[(r, c)] = space
                .id_of_channel(best)
                .expect("channel index below space length");
        }
    }
    default_table().unify(&Raster::new(out, meters_per_pixel))
}

/// A trained model restored for inference.
pub struct Predictor {
    store: ParamStore,
    model: Model,
}

/// Restores a train checkpoint for inference. Denoiser checkpoints are
/// refused: they carry no segmentation heads, and building heads here would
/// silently hand out untrained ones.
pub fn load_predictor(dir: &Path) -> Result<Predictor> {
    let peek = checkpoint::read_meta(dir)?;
    if peek.meta.kind != CheckpointKind::Train {
        return Err(Error::Checkpoint(
            "prediction needs a train checkpoint; a denoiser alone has no heads".into(),
        ));
    }
    let mut store = ParamStore::new(peek.meta.seed);
    let loaded = checkpoint::load(dir, &mut store)?;
    let named_before = store.names().len();
    let mut model = Model::build(&mut store, &loaded.config)?;
    if store.names().len() != named_before {
        return Err(Error::Checkpoint(
            "checkpoint is missing model parameters for its own config".into(),
        ));
    }
    model.freeze_denoiser(&mut store);
    Ok(Predictor { store, model })
}

impl Predictor {
    pub fn config(&self) -> &RunConfig {
        self.model.config()
    }

    /// The restored parameters and model, for callers that drive their own
    /// forward passes.
    pub fn into_parts(self) -> (ParamStore, Model) {
        (self.store, self.model)
    }

    /// Mean class probabilities over the scene, `(classes, H, W)`.
    /// Dimensions smaller than the crop are replicate-padded for the
    /// forward pass and cut back on output.
    pub fn predict_probs(&mut self, image: &ImageRaster) -> Result<Array3<f32>> {
        let (h, w, depth) = image.data().dim();
        if depth != 3 {
            return Err(Error::shape(format!("{depth}-channel image, expected 3")));
        }
        let crop = self.model.config().data.crop_size;
        let batch = self.model.config().train.batch_size.max(1);
        let classes = self.model.classes();
        let (ph, pw) = (h.max(crop), w.max(crop));

        let data = image.data();
        let sample = |r: usize, c: usize, k: usize| data[(r.min(h - 1), c.min(w - 1), k)];

        let mut windows = Vec::new();
        for &r0 in &window_starts(ph, crop) {
            for &c0 in &window_starts(pw, crop) {
                windows.push((r0, c0));
            }
        }

        let mut composer = ProbComposer::new(classes, ph, pw);
        for chunk in windows.chunks(batch) {
            let b = chunk.len();
            let mut host = vec![0f32; b * 3 * crop * crop];
            for (bi, &(r0, c0)) in chunk.iter().enumerate() {
                for k in 0..3 {
                    for r in 0..crop {
                        for c in 0..crop {
                            host[((bi * 3 + k) * crop + r) * crop + c] =
                                sample(r0 + r, c0 + c, k) * 2.0 - 1.0;
                        }
                    }
                }
            }
            let images = Tensor::from_vec(host, (b, 3, crop, crop), self.store.device())?;
            let pred = self.model.eval_forward(&mut self.store, &images)?;
            let probs = pred.probs().flatten_all()?.to_vec1::<f32>()?;
            let stride = classes * crop * crop;
            for (bi, &(r0, c0)) in chunk.iter().enumerate() {
                composer.add(r0, c0, crop, &probs[bi * stride..(bi + 1) * stride]);
            }
        }

        let mean = composer.mean()?;
        if (ph, pw) == (h, w) {
            Ok(mean)
        } else {
            Ok(mean.slice(ndarray::s![.., ..h, ..w]).to_owned())
        }
    }

    /// Target-space label raster for the scene.
    pub fn predict_scene(&mut self, image: &ImageRaster) -> Result<Raster<u16>> {
        let mean = self.predict_probs(image)?;
        labels_from_probs(&mean, image.meters_per_pixel)
    }
}

fn pred_file(dir: &Path, scene: usize) -> PathBuf {
    dir.join(format!("pred_{scene}.npy"))
}

#[derive(Debug)]
pub struct PredictOutcome {
    pub files: Vec<PathBuf>,
}

/// Predicts every scene of `split` (as named by the checkpoint's config)
/// and writes one u16 target-id raster per scene under `out_dir`.
pub fn cmd_predict(ckpt_dir: &Path, split: &str, out_dir: &Path) -> Result<PredictOutcome> {
    let mut predictor = load_predictor(ckpt_dir)?;
    let root = PathBuf::from(&predictor.config().data.root);
    let pairs = load_split(&root, split)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let pred = predictor.predict_scene(&pair.image)?;
        let path = pred_file(out_dir, i);
        write_npy(&path, pred.data()).map_err(|e| Error::dataset(&path, e.to_string()))?;
        files.push(path);
    }
    Ok(PredictOutcome { files })
}

/// A scene that could not be scored, with the reason.
#[derive(Debug)]
pub struct SceneIssue {
    pub scene: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: IoUReport,
    pub skipped: Vec<SceneIssue>,
    pub scored: usize,
}

/// Scores predictions against ground truth in the target space.
/// `pred_for(i)` supplies the prediction for scene `i`; a scene whose
/// prediction is missing or misshapen is reported and skipped rather than
/// poisoning the whole run.
pub fn evaluate_predictions<F>(pairs: &[ScenePair], mut pred_for: F) -> Result<EvalOutcome>
where
    F: FnMut(usize) -> Result<Raster<u16>>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("no scenes"));
    }
    let mut cm = ConfusionMatrix::new(&target_space());
    let mut skipped = Vec::new();
    let mut scored = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        match pred_for(i).and_then(|pred| cm.accumulate(&pred, &pair.hr_labels)) {
            Ok(()) => scored += 1,
            Err(e) => skipped.push(SceneIssue {
                scene: i,
                reason: e.to_string(),
            }),
        }
    }
    if scored == 0 {
        return Err(Error::invalid("no scenes scored"));
    }
    let report = iou_report(&cm)?;
    Ok(EvalOutcome {
        report,
        skipped,
        scored,
    })
}

/// Scores the prediction rasters under `pred_dir` against `split` and
/// writes `iou_<split>.csv` under `out_dir`. Callers decide the process
/// exit code from `skipped`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    split: &str,
    pred_dir: &Path,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let pairs = match load_split(Path::new(&cfg.data.root), split) {
        Err(Error::Dataset { message, .. }) if message.contains("no entries") => {
            return Err(Error::invalid(format!("no scenes in split {split:?}")));
        }
        other => other?,
    };
    let outcome = evaluate_predictions(&pairs, |i| {
        let path = pred_file(pred_dir, i);
        let arr: Array2<u16> =
            read_npy(&path).map_err(|e| Error::dataset(&path, e.to_string()))?;
        Ok(Raster::new(arr, pairs[i].hr_labels.meters_per_pixel))
    })?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("iou_{split}.csv"));
    std::fs::write(&csv_path, outcome.report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(outcome)
}
