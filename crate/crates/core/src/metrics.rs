//! Confusion counts and foreground IoU.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// `truth` and `pred` are single-channel {0, 1} label tensors.
    pub fn from_labels(truth: &Tensor, pred: &Tensor) -> Result<Self> {
        if truth.shape() != pred.shape() {
            return Err(Error::ShapeMismatch(format!("labels {} vs prediction {}", truth.shape(), pred.shape())));
        }
        let mut c = ConfusionCounts::default();
        for (&y, &p) in truth.as_slice().iter().zip(pred.as_slice()) {
            match (binary(y)?, binary(p)?) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`, and 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

fn binary(v: f64) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(Error::InvalidData(format!("label value {v} is not 0 or 1")))
    }
}

/// Per-voxel argmax of a two-channel tensor; exact ties go to class 0.
pub fn binarize(scores: &Tensor) -> Result<Tensor> {
    let s = scores.shape();
    if s.c != 2 {
        return Err(Error::ShapeMismatch(format!("binarize needs 2 channels, got {s}")));
    }
    let v: Vec<f64> = scores
        .as_slice()
        .chunks_exact(2)
        .map(|p| if p[1] > p[0] { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(s.with_c(1), v)
}

/// Foreground IoU of two label tensors.
pub fn iou(y: &Tensor, p: &Tensor) -> Result<f64> {
    Ok(ConfusionCounts::from_labels(y, p)?.iou())
}
