//! Prediction heads and the confidence-aware pseudo-label objective.
//!
//! The diffusion branch's prediction supervises two things: a cross-entropy
//! term against the (upsampled) low-resolution labels, and per-class feature
//! prototypes from which a cosine confidence mask is built. The transformer
//! branch's prediction is then trained on the argmax pseudo labels only
//! where the mask holds. Prototypes, pseudo labels, and the mask are all
//! constants with respect to the graph: supervision signals, not gradient
//! paths.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::label_space::LabelSpace;
use crate::nn::blocks::Conv2d;
use crate::nn::params::ParamStore;

/// Per-pixel class distribution plus its argmax, channel-indexed.
/// Channel `k` corresponds to `space.id_of_channel(k)` wherever a label
/// space is in play.
#[derive(Debug, Clone)]
pub struct PredictionMap {
    probs: Tensor,
    hard: Tensor,
}

impl PredictionMap {
    /// Wraps probabilities, checking each pixel sums to 1 within 1e-5.
    /// Argmax ties break toward the lowest channel.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let (b, c, h, w) = probs.dims4()?;
        if c == 0 {
            return Err(Error::shape("prediction needs at least one class"));
        }
        let host = probs.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let mut hard = vec![0u32; b * plane];
        for bi in 0..b {
            for p in 0..plane {
                let mut best = 0usize;
                let mut best_v = host[bi * c * plane + p];
                let mut sum = best_v;
                for ch in 1..c {
                    let v = host[(bi * c + ch) * plane + p];
                    sum += v;
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!(
                        "pixel distribution sums to {sum}, not 1"
                    )));
                }
                hard[bi * plane + p] = best as u32;
            }
        }
        let hard = Tensor::from_vec(hard, (b, h, w), probs.device())?;
        Ok(Self { probs, hard })
    }

    /// Softmax over the class axis, then wrap. The simplex property holds
    /// by construction here, so the validation scan is skipped; the argmax
    /// keeps the same ties-to-lowest rule (first maximum wins).
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (_, c, _, _) = logits.dims4()?;
        if c == 0 {
            return Err(Error::shape("prediction needs at least one class"));
        }
        let m = logits.max_keepdim(1)?.detach();
        let e = logits.broadcast_sub(&m)?.exp()?;
        let s = e.sum_keepdim(1)?;
        let probs = e.broadcast_div(&s)?;
        let hard = probs.argmax(1)?;
        Ok(Self { probs, hard })
    }

    /// (batch, classes, height, width), rows on the simplex.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// (batch, height, width) u32 channel indices; not part of the graph.
    pub fn hard(&self) -> &Tensor {
        &self.hard
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.probs.dim(1)?)
    }
}

/// 1x1 convolution from the fused representation to class logits.
pub struct PredictHead {
    conv: Conv2d,
    classes: usize,
}

impl PredictHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, in_channels, classes, 1, 1, 0)?,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn forward(&self, features: &Tensor) -> Result<PredictionMap> {
        PredictionMap::from_logits(&self.conv.forward(features)?)
    }
}

/// Stacks id rasters into a (batch, height, width) u32 tensor.
pub fn label_batch(rasters: &[&Raster<u16>], device: &Device) -> Result<Tensor> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::invalid("empty label batch"))?;
    let (h, w) = first.shape();
    let mut host = Vec::with_capacity(rasters.len() * h * w);
    for r in rasters {
        if r.shape() != (h, w) {
            return Err(Error::shape(format!(
                "label raster {:?} in a batch of {h}x{w}",
                r.shape()
            )));
        }
        host.extend(r.data().iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(host, (rasters.len(), h, w), device)?)
}

/// Nearest-neighbor id upsampling (source index = floor(out * in / out_len)),
/// used to lift low-resolution labels to prediction resolution.
pub fn resize_ids_nearest(labels: &Raster<u16>, out_h: usize, out_w: usize) -> Result<Raster<u16>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let (h, w) = labels.shape();
    let mpp = labels.meters_per_pixel * h as f64 / out_h as f64;
    let mut out = Raster::filled(out_h, out_w, 0u16, mpp);
    for oy in 0..out_h {
        let sy = oy * h / out_h;
        for ox in 0..out_w {
            let sx = ox * w / out_w;
            out.data_mut()[(oy, ox)] = labels.data()[(sy, sx)];
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over non-ignored pixels. Labels hold class
/// ids from `space`; its ignore id marks unsupervised pixels.
pub fn ce_loss(pred: &PredictionMap, labels: &Tensor, space: &LabelSpace) -> Result<Tensor> {
    let (b, c, h, w) = pred.probs().dims4()?;
    if c != space.len() {
        return Err(Error::shape(format!(
            "{c} prediction channels for a {}-class space",
            space.len()
        )));
    }
    if labels.dims() != [b, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} for predictions {b}x{h}x{w}",
            labels.dims()
        )));
    }
    let ids = labels.flatten_all()?.to_vec1::<u32>()?;
    let mut idx = vec![0u32; b * h * w];
    let mut keep = vec![0f32; b * h * w];
    let mut kept = 0usize;
    for (i, &id) in ids.iter().enumerate() {
        if space.ignore_id() == Some(id as u16) {
            continue;
        }
        match space.channel_of(id as u16) {
            Some(ch) => {
                idx[i] = ch as u32;
                keep[i] = 1.0;
                kept += 1;
            }
            None => {
                let (row, col) = ((i / w) % h, i % w);
                return Err(Error::LabelOutOfSpace {
                    value: id as u16,
                    row,
                    col,
                    space: space.name().to_string(),
                });
            }
        }
    }
    if kept == 0 {
        return Err(Error::EmptySupervision);
    }
    let idx = Tensor::from_vec(idx, (b, 1, h, w), pred.probs().device())?;
    let keep = Tensor::from_vec(keep, (b, h, w), pred.probs().device())?;
    let picked = pred.probs().gather(&idx, 1)?.squeeze(1)?;
    let nll = picked.log()?.neg()?;
    let total = (nll * keep)?.sum_all()?;
    Ok((total / kept as f64)?)
}

/// Mean feature vector per predicted class, detached from the graph.
#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    protos: Vec<Option<Vec<f32>>>,
    dim: usize,
}

impl ClassPrototypes {
    pub fn classes(&self) -> usize {
        self.protos.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn present(&self, channel: usize) -> bool {
        self.protos.get(channel).is_some_and(|p| p.is_some())
    }

    pub fn get(&self, channel: usize) -> Option<&[f32]> {
        self.protos.get(channel)?.as_deref()
    }
}

/// Averages `features` over the pixels `hard` assigns to each class.
/// Classes with no pixels are absent, not errors.
pub fn compute_prototypes(
    features: &Tensor,
    hard: &Tensor,
    classes: usize,
) -> Result<ClassPrototypes> {
    let (b, d, h, w) = features.dims4()?;
    if hard.dims() != [b, h, w] {
        return Err(Error::shape(format!(
            "hard labels {:?} for features {b}x{h}x{w}",
            hard.dims()
        )));
    }
    let feats = features.detach().flatten_all()?.to_vec1::<f32>()?;
    let ids = hard.flatten_all()?.to_vec1::<u32>()?;
    let plane = h * w;
    let mut sums = vec![vec![0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for bi in 0..b {
        for p in 0..plane {
            let ch = ids[bi * plane + p] as usize;
            if ch >= classes {
                return Err(Error::invalid(format!(
                    "hard label {ch} outside {classes} classes"
                )));
            }
            counts[ch] += 1;
            for k in 0..d {
                sums[ch][k] += feats[(bi * d + k) * plane + p] as f64;
            }
        }
    }
    let protos = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            (n > 0).then(|| s.into_iter().map(|v| (v / n as f64) as f32).collect())
        })
        .collect();
    Ok(ClassPrototypes { protos, dim: d })
}

/// Boolean confidence mask over the batch plus the threshold it was built
/// with. Constant with respect to the graph.
#[derive(Debug, Clone)]
pub struct ConfidenceMask {
    mask: Vec<bool>,
    dims: (usize, usize, usize),
    tau: f64,
}

impl ConfidenceMask {
    /// Degenerate mask keeping every pixel: pseudo-label supervision
    /// without confidence filtering. Records `tau` as -1, the vacuous
    /// threshold.
    pub fn full(dims: (usize, usize, usize)) -> Self {
        let (b, h, w) = dims;
        Self {
            mask: vec![true; b * h * w],
            dims,
            tau: -1.0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.mask.len() as f64
        }
    }
}

/// Cosine similarity of each pixel's feature against the prototype of its
/// predicted class, thresholded inclusively at `tau`. Pixels whose class has
/// no prototype, or whose feature or prototype has zero norm, are masked out
/// regardless of `tau`.
pub fn confidence_mask(
    features: &Tensor,
    hard: &Tensor,
    protos: &ClassPrototypes,
    tau: f64,
) -> Result<ConfidenceMask> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau {tau} outside [-1, 1]")));
    }
    let (b, d, h, w) = features.dims4()?;
    if hard.dims() != [b, h, w] {
        return Err(Error::shape(format!(
            "hard labels {:?} for features {b}x{h}x{w}",
            hard.dims()
        )));
    }
    if protos.dim() != d {
        return Err(Error::shape(format!(
            "prototypes of dim {} for {d}-channel features",
            protos.dim()
        )));
    }
    let feats = features.detach().flatten_all()?.to_vec1::<f32>()?;
    let ids = hard.flatten_all()?.to_vec1::<u32>()?;
    let plane = h * w;
    let proto_norms: Vec<Option<f64>> = (0..protos.classes())
        .map(|c| {
            protos.get(c).map(|p| {
                p.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
            })
        })
        .collect();
    let mut mask = vec![false; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let ch = ids[bi * plane + p] as usize;
            let (Some(proto), Some(pn)) = (protos.get(ch), proto_norms[ch]) else {
                continue;
            };
            if pn == 0.0 {
                continue;
            }
            let mut dot = 0f64;
            let mut fn2 = 0f64;
            for k in 0..d {
                let f = feats[(bi * d + k) * plane + p] as f64;
                dot += f * proto[k] as f64;
                fn2 += f * f;
            }
            if fn2 == 0.0 {
                continue;
            }
            mask[bi * plane + p] = dot / (fn2.sqrt() * pn) >= tau;
        }
    }
    Ok(ConfidenceMask {
        mask,
        dims: (b, h, w),
        tau,
    })
}

/// Kept-pixel counts overall and per class, for training logs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub kept: usize,
    pub total: usize,
    /// (kept, assigned) per channel index.
    pub per_class: Vec<(usize, usize)>,
}

pub fn mask_stats(mask: &ConfidenceMask, hard: &Tensor, classes: usize) -> Result<MaskStats> {
    let ids = hard.flatten_all()?.to_vec1::<u32>()?;
    if ids.len() != mask.values().len() {
        return Err(Error::shape("mask and hard labels disagree in size"));
    }
    let mut per_class = vec![(0usize, 0usize); classes];
    for (&id, &m) in ids.iter().zip(mask.values()) {
        let slot = &mut per_class[id as usize];
        slot.1 += 1;
        if m {
            slot.0 += 1;
        }
    }
    Ok(MaskStats {
        kept: mask.kept(),
        total: mask.values().len(),
        per_class,
    })
}

/// Masked cross-entropy outcome: either a scalar loss tensor or the
/// distinguished no-supervision signal when the mask kept nothing.
pub enum MaskedLoss {
    Loss(Tensor),
    NoSupervision,
}

impl MaskedLoss {
    pub fn value(&self) -> Option<&Tensor> {
        match self {
            MaskedLoss::Loss(t) => Some(t),
            MaskedLoss::NoSupervision => None,
        }
    }
}

/// Mean negative log-likelihood of the pseudo labels over mask-true pixels.
/// `pseudo` holds channel indices and is treated as constant.
pub fn masked_ce_loss(
    pred: &PredictionMap,
    pseudo: &Tensor,
    mask: &ConfidenceMask,
) -> Result<MaskedLoss> {
    let (b, c, h, w) = pred.probs().dims4()?;
    if pseudo.dims() != [b, h, w] {
        return Err(Error::shape(format!(
            "pseudo labels {:?} for predictions {b}x{h}x{w}",
            pseudo.dims()
        )));
    }
    if mask.dims() != (b, h, w) {
        return Err(Error::shape(format!(
            "mask {:?} for predictions {b}x{h}x{w}",
            mask.dims()
        )));
    }
    let ids = pseudo.flatten_all()?.to_vec1::<u32>()?;
    let mut idx = vec![0u32; b * h * w];
    let mut keep = vec![0f32; b * h * w];
    let mut kept = 0usize;
    for (i, (&id, &m)) in ids.iter().zip(mask.values()).enumerate() {
        if !m {
            continue;
        }
        if id as usize >= c {
            return Err(Error::invalid(format!(
                "pseudo label {id} outside {c} channels"
            )));
        }
        idx[i] = id;
        keep[i] = 1.0;
        kept += 1;
    }
    if kept == 0 {
        return Ok(MaskedLoss::NoSupervision);
    }
    let idx = Tensor::from_vec(idx, (b, 1, h, w), pred.probs().device())?;
    let keep = Tensor::from_vec(keep, (b, h, w), pred.probs().device())?;
    let picked = pred.probs().gather(&idx, 1)?.squeeze(1)?;
    let nll = picked.log()?.neg()?;
    let total = (nll * keep)?.sum_all()?;
    Ok(MaskedLoss::Loss((total / kept as f64)?))
}

/// `lambda * l1 + (1 - lambda) * l2`; a no-supervision second term
/// contributes nothing beyond the weighted first term.
pub fn total_loss(l1: &Tensor, l2: &MaskedLoss, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let weighted = (l1 * lambda)?;
    match l2 {
        MaskedLoss::Loss(t) => Ok((weighted + (t * (1.0 - lambda))?)?),
        MaskedLoss::NoSupervision => Ok(weighted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, D};
    use crate::label_space::target_space;
    use crate::nn::testsupport::{gradcheck, rand_tensor};

    fn probs_from(host: Vec<f32>, dims: (usize, usize, usize, usize)) -> PredictionMap {
        let t = Tensor::from_vec(host, dims, &Device::Cpu).unwrap();
        PredictionMap::from_probs(t).unwrap()
    }

    #[test]
    fn head_on_zero_features_is_uniform() {
        let mut store = ParamStore::new(1);
        let head = PredictHead::new(&mut store, "head", 6, 4).unwrap();
        let f = Tensor::zeros(&[1, 6, 2, 2], DType::F32, &Device::Cpu).unwrap();
        let pred = head.forward(&f).unwrap();
        let host = pred.probs().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for v in host {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn probabilities_stay_on_simplex() {
        let mut store = ParamStore::new(2);
        let head = PredictHead::new(&mut store, "head", 5, 3).unwrap();
        let f = rand_tensor(&[2, 5, 4, 4], 3);
        let pred = head.forward(&f).unwrap();
        let sums = pred
            .probs()
            .sum(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn hard_argmax_with_low_channel_ties() {
        // 2x2 image, 4 channels; pixel (1,1) ties channels 1 and 3.
        #[rustfmt::skip]
        let host = vec![
            // channel 0        channel 1
            0.7, 0.1, 0.25, 0.1,  0.1, 0.6, 0.25, 0.4,
            // channel 2        channel 3
            0.1, 0.2, 0.25, 0.1,  0.1, 0.1, 0.25, 0.4,
        ];
        let pred = probs_from(host, (1, 4, 2, 2));
        let hard = pred.hard().flatten_all().unwrap().to_vec1::<u32>().unwrap();
        assert_eq!(hard, vec![0, 1, 0, 1], "ties break to the lowest channel");
    }

    #[test]
    fn ce_of_exact_onehot_is_zero() {
        let host = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]; // 2 px, 4 ch
        let pred = probs_from(host, (1, 4, 1, 2));
        let labels = Tensor::from_vec(vec![1u32, 2], (1, 1, 2), &Device::Cpu).unwrap();
        let space = target_space();
        let loss = ce_loss(&pred, &labels, &space).unwrap();
        assert_eq!(loss.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn ce_of_uniform_is_log_class_count() {
        let host = vec![0.25f32; 4 * 4]; // 2x2 image, 4 channels
        let pred = probs_from(host, (1, 4, 2, 2));
        let labels = Tensor::from_vec(vec![1u32, 2, 3, 4], (1, 2, 2), &Device::Cpu).unwrap();
        let loss = ce_loss(&pred, &labels, &target_space()).unwrap();
        let expect = (4.0f32).ln();
        assert!((loss.to_scalar::<f32>().unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn ce_matches_hand_computed_mean() {
        let host = vec![0.7f32, 0.2, 0.3, 0.8]; // 2 px, 2 ch
        let t = Tensor::from_vec(host, (1, 2, 1, 2), &Device::Cpu).unwrap();
        let pred = PredictionMap::from_probs(t).unwrap();
        let space = LabelSpace::new(
            "pair",
            vec![1, 2],
            vec!["a".to_string(), "b".to_string()],
            Some(0),
        )
        .unwrap();
        let labels = Tensor::from_vec(vec![1u32, 1], (1, 1, 2), &Device::Cpu).unwrap();
        let loss = ce_loss(&pred, &labels, &space).unwrap().to_scalar::<f32>().unwrap();
        let expect = -((0.7f64.ln() + 0.2f64.ln()) / 2.0) as f32;
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn ce_ignores_nodata_and_rejects_empty() {
        let host = vec![0.6f32, 0.1, 0.4, 0.9];
        let t = Tensor::from_vec(host, (1, 2, 1, 2), &Device::Cpu).unwrap();
        let pred = PredictionMap::from_probs(t).unwrap();
        let space = LabelSpace::new(
            "pair",
            vec![1, 2],
            vec!["a".to_string(), "b".to_string()],
            Some(0),
        )
        .unwrap();
        let labels = Tensor::from_vec(vec![0u32, 2], (1, 1, 2), &Device::Cpu).unwrap();
        let loss = ce_loss(&pred, &labels, &space).unwrap().to_scalar::<f32>().unwrap();
        let expect = -(0.9f32).ln();
        assert!((loss - expect).abs() < 1e-6);

        let all_ignore = Tensor::from_vec(vec![0u32, 0], (1, 1, 2), &Device::Cpu).unwrap();
        assert!(matches!(
            ce_loss(&pred, &all_ignore, &space),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn ce_rejects_out_of_space_labels_with_location() {
        let host = vec![0.6f32, 0.1, 0.4, 0.9];
        let t = Tensor::from_vec(host, (1, 2, 1, 2), &Device::Cpu).unwrap();
        let pred = PredictionMap::from_probs(t).unwrap();
        let space = LabelSpace::new(
            "pair",
            vec![1, 2],
            vec!["a".to_string(), "b".to_string()],
            Some(0),
        )
        .unwrap();
        let labels = Tensor::from_vec(vec![1u32, 9], (1, 1, 2), &Device::Cpu).unwrap();
        match ce_loss(&pred, &labels, &space) {
            Err(Error::LabelOutOfSpace { value, row, col, .. }) => {
                assert_eq!((value, row, col), (9, 0, 1));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn prototype_of_single_class_is_spatial_mean() {
        let f = rand_tensor(&[1, 3, 4, 4], 4);
        let hard = Tensor::zeros(&[1, 4, 4], DType::U32, &Device::Cpu).unwrap();
        let protos = compute_prototypes(&f, &hard, 2).unwrap();
        assert!(protos.present(0));
        assert!(!protos.present(1));
        let mean = f
            .mean(D::Minus1)
            .unwrap()
            .mean(D::Minus1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for (a, b) in protos.get(0).unwrap().iter().zip(mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn prototype_of_two_pixels_is_their_mean() {
        let f = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 1.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let hard = Tensor::zeros(&[1, 1, 2], DType::U32, &Device::Cpu).unwrap();
        let protos = compute_prototypes(&f, &hard, 1).unwrap();
        assert_eq!(protos.get(0).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn mask_thresholds_cosine_against_prototypes() {
        // Two feature dims; prototype of class 0 points along +x.
        let f = Tensor::from_vec(
            vec![
                1.0f32, 2.0, 0.0, -1.0, // x components of 4 pixels
                0.0, 0.0, 1.0, 0.0, // y components
            ],
            (1, 2, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        let hard = Tensor::zeros(&[1, 2, 2], DType::U32, &Device::Cpu).unwrap();
        // Build a clean +x prototype from a single aligned pixel.
        let fx = Tensor::from_vec(vec![1.0f32, 0.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let c0 = Tensor::zeros(&[1, 1, 1], DType::U32, &Device::Cpu).unwrap();
        let protos = compute_prototypes(&fx, &c0, 1).unwrap();
        let mask = confidence_mask(&f, &hard, &protos, 0.9).unwrap();
        // parallel, parallel, orthogonal, anti-parallel
        assert_eq!(mask.values(), &[true, true, false, false]);
        assert_eq!(mask.kept(), 2);
        assert!((mask.kept_fraction() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mask_matches_brute_force_oracle_at_many_taus() {
        let f = rand_tensor(&[2, 5, 3, 3], 5);
        let logits = rand_tensor(&[2, 3, 3, 3], 6);
        let pred = PredictionMap::from_logits(&logits).unwrap();
        let protos = compute_prototypes(&f, pred.hard(), 3).unwrap();
        let feats = f.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ids = pred.hard().flatten_all().unwrap().to_vec1::<u32>().unwrap();
        for tau in [-1.0, -0.5, 0.0, 0.3, 0.9, 1.0] {
            let mask = confidence_mask(&f, pred.hard(), &protos, tau).unwrap();
            for b in 0..2 {
                for p in 0..9 {
                    let ch = ids[b * 9 + p] as usize;
                    let expect = match protos.get(ch) {
                        None => false,
                        Some(proto) => {
                            let mut dot = 0f64;
                            let mut nf = 0f64;
                            let mut np = 0f64;
                            for k in 0..5 {
                                let fv = feats[(b * 5 + k) * 9 + p] as f64;
                                dot += fv * proto[k] as f64;
                                nf += fv * fv;
                                np += (proto[k] as f64) * (proto[k] as f64);
                            }
                            nf > 0.0 && np > 0.0 && dot / (nf.sqrt() * np.sqrt()) >= tau
                        }
                    };
                    assert_eq!(
                        mask.values()[b * 9 + p],
                        expect,
                        "tau {tau} batch {b} pixel {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn mask_false_for_zero_norm_even_at_minus_one() {
        let f = Tensor::from_vec(vec![0.0f32, 1.0, 0.0, 0.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        // pixel 0 has feature (0, 0); pixel 1 has (1, 0)
        let hard = Tensor::zeros(&[1, 1, 2], DType::U32, &Device::Cpu).unwrap();
        let protos = compute_prototypes(&f, &hard, 2).unwrap();
        let mask = confidence_mask(&f, &hard, &protos, -1.0).unwrap();
        assert_eq!(mask.values(), &[false, true]);
        // class 1 never predicted: absent prototype keeps pixels false
        let hard1 = Tensor::from_vec(vec![1u32, 1], (1, 1, 2), &Device::Cpu).unwrap();
        let mask = confidence_mask(&f, &hard1, &protos, -1.0).unwrap();
        assert_eq!(mask.values(), &[false, false]);
    }

    #[test]
    fn mask_is_scale_invariant() {
        let f = rand_tensor(&[1, 4, 4, 4], 7);
        let logits = rand_tensor(&[1, 2, 4, 4], 8);
        let pred = PredictionMap::from_logits(&logits).unwrap();
        let protos = compute_prototypes(&f, pred.hard(), 2).unwrap();
        let base = confidence_mask(&f, pred.hard(), &protos, 0.9).unwrap();
        for a in [0.5f64, 2.0, 4.0, 3.7] {
            let scaled = (&f * a).unwrap();
            let mask = confidence_mask(&scaled, pred.hard(), &protos, 0.9).unwrap();
            assert_eq!(mask.values(), base.values(), "scale {a} changed the mask");
        }
    }

    #[test]
    fn mask_shrinks_as_tau_rises() {
        let f = rand_tensor(&[1, 4, 5, 5], 9);
        let logits = rand_tensor(&[1, 3, 5, 5], 10);
        let pred = PredictionMap::from_logits(&logits).unwrap();
        let protos = compute_prototypes(&f, pred.hard(), 3).unwrap();
        let taus = [-1.0, -0.6, -0.2, 0.0, 0.2, 0.6, 0.9, 1.0];
        let masks: Vec<ConfidenceMask> = taus
            .iter()
            .map(|&t| confidence_mask(&f, pred.hard(), &protos, t).unwrap())
            .collect();
        for pair in masks.windows(2) {
            for (lo, hi) in pair[0].values().iter().zip(pair[1].values()) {
                assert!(!hi | lo, "raising tau turned a pixel on");
            }
        }
    }

    #[test]
    fn masked_ce_with_full_mask_equals_plain_ce() {
        let logits = rand_tensor(&[2, 4, 3, 3], 11);
        let pred = PredictionMap::from_logits(&logits).unwrap();
        let space = target_space();
        // channel k <-> id k+1 in the four-class space
        let pseudo_ids: Vec<u32> = pred
            .hard()
            .flatten_all()
            .unwrap()
            .to_vec1::<u32>()
            .unwrap()
            .iter()
            .map(|&c| c + 1)
            .collect();
        let labels = Tensor::from_vec(pseudo_ids, (2, 3, 3), &Device::Cpu).unwrap();
        let plain = ce_loss(&pred, &labels, &space)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        let full = ConfidenceMask {
            mask: vec![true; 18],
            dims: (2, 3, 3),
            tau: -1.0,
        };
        let masked = masked_ce_loss(&pred, pred.hard(), &full).unwrap();
        let masked = masked.value().unwrap().to_scalar::<f32>().unwrap();
        assert!((masked - plain).abs() < 1e-9);
    }

    #[test]
    fn masked_ce_all_false_signals_no_supervision() {
        let logits = rand_tensor(&[1, 3, 2, 2], 12);
        let pred = PredictionMap::from_logits(&logits).unwrap();
        let empty = ConfidenceMask {
            mask: vec![false; 4],
            dims: (1, 2, 2),
            tau: 0.9,
        };
        let out = masked_ce_loss(&pred, pred.hard(), &empty).unwrap();
        assert!(matches!(out, MaskedLoss::NoSupervision));
    }

    #[test]
    fn masked_ce_single_pixel_oracle() {
        let host = vec![0.5f32, 0.9, 0.5, 0.1]; // 2 px, 2 ch
        let t = Tensor::from_vec(host, (1, 2, 1, 2), &Device::Cpu).unwrap();
        let pred = PredictionMap::from_probs(t).unwrap();
        let pseudo = Tensor::zeros(&[1, 1, 2], DType::U32, &Device::Cpu).unwrap();
        let mask = ConfidenceMask {
            mask: vec![true, false],
            dims: (1, 1, 2),
            tau: 0.9,
        };
        let out = masked_ce_loss(&pred, &pseudo, &mask).unwrap();
        let v = out.value().unwrap().to_scalar::<f32>().unwrap();
        assert!((v - (-(0.5f32).ln())).abs() < 1e-6);
    }

    #[test]
    fn masked_ce_gradient_matches_finite_differences() {
        let pseudo = Tensor::from_vec(vec![0u32, 2, 1, 0], (1, 2, 2), &Device::Cpu).unwrap();
        let mask = ConfidenceMask {
            mask: vec![true, false, true, true],
            dims: (1, 2, 2),
            tau: 0.9,
        };
        gradcheck(
            &[1, 3, 2, 2],
            13,
            |logits| {
                let pred = PredictionMap::from_logits(logits)?;
                match masked_ce_loss(&pred, &pseudo, &mask)? {
                    MaskedLoss::Loss(t) => Ok(t),
                    MaskedLoss::NoSupervision => unreachable!(),
                }
            },
            1e-2,
            1e-4,
        );
    }

    #[test]
    fn total_loss_mixes_and_handles_missing_second_term() {
        let l1 = Tensor::full(2.0f32, (), &Device::Cpu).unwrap();
        let l2 = MaskedLoss::Loss(Tensor::full(4.0f32, (), &Device::Cpu).unwrap());
        let t = total_loss(&l1, &l2, 0.5).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(t, 3.0);
        let t = total_loss(&l1, &l2, 1.0).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(t, 2.0);
        let t = total_loss(&l1, &MaskedLoss::NoSupervision, 0.5)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(t, 1.0);
        assert!(total_loss(&l1, &l2, 1.5).is_err());
    }

    #[test]
    fn label_upsampling_replicates_blocks() {
        let mut r = Raster::filled(2, 2, 0u16, 30.0);
        r.data_mut()[(0, 0)] = 1;
        r.data_mut()[(0, 1)] = 2;
        r.data_mut()[(1, 0)] = 3;
        r.data_mut()[(1, 1)] = 4;
        let up = resize_ids_nearest(&r, 4, 4).unwrap();
        let expect = [
            [1, 1, 2, 2],
            [1, 1, 2, 2],
            [3, 3, 4, 4],
            [3, 3, 4, 4],
        ];
        for (y, row) in expect.iter().enumerate() {
            for (x, &want) in row.iter().enumerate() {
                assert_eq!(up.data()[(y, x)], want);
            }
        }
        assert!((up.meters_per_pixel - 15.0).abs() < 1e-12);
    }

    #[test]
    fn mask_stats_count_per_class() {
        let hard = Tensor::from_vec(vec![0u32, 0, 1, 2], (1, 2, 2), &Device::Cpu).unwrap();
        let mask = ConfidenceMask {
            mask: vec![true, false, true, false],
            dims: (1, 2, 2),
            tau: 0.9,
        };
        let stats = mask_stats(&mask, &hard, 3).unwrap();
        assert_eq!(stats.kept, 2);
        assert_eq!(stats.total, 4);
        assert_eq!(stats.per_class, vec![(1, 2), (1, 1), (0, 1)]);
    }

    #[test]
    fn label_batch_stacks_and_validates() {
        let a = Raster::filled(2, 3, 1u16, 10.0);
        let b = Raster::filled(2, 3, 4u16, 10.0);
        let t = label_batch(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 3]);
        let c = Raster::filled(3, 3, 1u16, 10.0);
        assert!(label_batch(&[&a, &c], &Device::Cpu).is_err());
    }
}
