//! Confusion-matrix accumulation and IoU scoring in a fixed label space.
//!
//! Matrices index classes by channel (the position of an id in the space),
//! rows for ground truth and columns for prediction. Pixels whose ground
//! truth is the no-data id are excluded; everything else must be a class of
//! the space. Accumulation is integer arithmetic, so tiling order and shard
//! merges cannot change the result.

use crate::error::{Error, Result};
use crate::grid::{expect_same_shape, Raster};
use crate::label_space::LabelSpace;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    space: LabelSpace,
}

impl ConfusionMatrix {
    pub fn new(space: &LabelSpace) -> Self {
        let c = space.len();
        Self {
            counts: vec![0; c * c],
            space: space.clone(),
        }
    }

    pub fn classes(&self) -> usize {
        self.space.len()
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    /// counts[gt_channel][pred_channel]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn channel_at(&self, id: u16, row: usize, col: usize) -> Result<usize> {
        self.space.channel_of(id).ok_or(Error::LabelOutOfSpace {
            value: id,
            row,
            col,
            space: self.space.name().to_string(),
        })
    }

    /// Adds one tile. Ground-truth no-data pixels are skipped; a prediction
    /// holding no-data where the ground truth is supervised is rejected,
    /// since it has no column to land in.
    pub fn accumulate(&mut self, pred: &Raster<u16>, gt: &Raster<u16>) -> Result<()> {
        expect_same_shape(pred, gt, "prediction vs ground truth")?;
        let c = self.classes();
        let (h, w) = gt.shape();
        for row in 0..h {
            for col in 0..w {
                let g = gt.data()[(row, col)];
                if self.space.ignore_id() == Some(g) {
                    continue;
                }
                let gi = self.channel_at(g, row, col)?;
                let pi = self.channel_at(pred.data()[(row, col)], row, col)?;
                self.counts[gi * c + pi] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum, for sharded evaluation.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.space != other.space {
            return Err(Error::invalid(
                "cannot merge confusion matrices over different spaces",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU with undefined classes flagged as `None`, and the mean
/// over the defined ones.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Ground-truth pixel count per class.
    pub support: Vec<u64>,
    names: Vec<String>,
}

impl IoUReport {
    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    /// class,iou,support rows; undefined classes carry an empty IoU field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,support\n");
        for (i, name) in self.names.iter().enumerate() {
            let iou = match self.per_class[i] {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            };
            out.push_str(&format!("{name},{iou},{}\n", self.support[i]));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        let scored = self.per_class.iter().filter(|c| c.is_some()).count();
        format!(
            "miou={:.6} over {scored} of {} classes",
            self.miou,
            self.per_class.len()
        )
    }
}

/// IoU_c = TP / (TP + FP + FN); classes absent from both sides are excluded
/// from the mean. An empty matrix has nothing to score and is rejected.
pub fn iou_report(cm: &ConfusionMatrix) -> Result<IoUReport> {
    if cm.total() == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let c = cm.classes();
    let mut per_class = Vec::with_capacity(c);
    let mut support = Vec::with_capacity(c);
    let mut sum = 0.0f64;
    let mut defined = 0usize;
    for k in 0..c {
        let tp = cm.count(k, k);
        let row: u64 = (0..c).map(|j| cm.count(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.count(i, k)).sum();
        support.push(row);
        let denom = row + col - tp;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    Ok(IoUReport {
        per_class,
        miou: sum / defined as f64,
        support,
        names: cm.space().class_names().to_vec(),
    })
}
