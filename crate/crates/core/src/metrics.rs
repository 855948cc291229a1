//! Dataset-level confusion matrix and intersection-over-union.

use crate::error::{Error, Result};
use crate::fields::{LabelMap, VOID_LABEL};

/// Counts with ground truth on rows and prediction on columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: usize) -> Self {
        ConfusionMatrix {
            labels,
            counts: vec![0; labels * labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.labels + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix over the same label set.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::shape(format!("{} labels", self.labels), other.labels));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds one count per pixel whose ground truth is not void.
pub fn accumulate(cm: &mut ConfusionMatrix, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(Error::shape(
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let l = cm.labels;
    for (i, (&g, &p)) in gt.labels().iter().zip(pred.labels()).enumerate() {
        if g == VOID_LABEL {
            continue;
        }
        let (g, p) = (g as usize, p as usize);
        if g >= l || p >= l {
            return Err(Error::Invalid(format!(
                "label pair ({g}, {p}) at pixel ({}, {}) is outside [0, {l})",
                i % gt.width(),
                i / gt.width()
            )));
        }
        cm.counts[g * l + p] += 1;
    }
    Ok(())
}

/// `TP / (TP + FP + FN)` per class; `None` when the denominator is zero.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let l = cm.labels;
    (0..l)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..l).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..l).map(|g| cm.get(g, c)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean over defined classes; `None` if no class is defined.
pub fn mean_iou(cm: &ConfusionMatrix) -> Option<f64> {
    let defined: Vec<f64> = iou_per_class(cm).into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
