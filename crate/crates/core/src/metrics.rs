//! Confusion-matrix accumulation and the three segmentation scores: pixel
//! accuracy, mean class accuracy and mean intersection-over-union.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    /// `None` for classes absent from the ground truth.
    pub class_acc: Vec<Option<f64>>,
    /// `None` for classes with an empty union.
    pub class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// Counts every pixel whose truth is not `ignore_label`.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap, ignore_label: u8) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::shape(format!(
                "prediction {:?} and truth {:?} differ in size",
                pred.dims(),
                truth.dims()
            )));
        }
        let k = self.classes;
        if let Some(&bad) = pred.data().iter().find(|&&p| p as usize >= k) {
            return Err(Error::invalid(format!("prediction {bad} out of range for {k} classes")));
        }
        if let Some(&bad) = truth
            .data()
            .iter()
            .find(|&&t| t != ignore_label && t as usize >= k)
        {
            return Err(Error::invalid(format!("truth label {bad} out of range for {k} classes")));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != ignore_label {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum, the only way partial matrices combine.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("confusion matrix has no counted pixels"));
        }
        let k = self.classes;
        let mut class_acc = vec![None; k];
        let mut class_iou = vec![None; k];
        for c in 0..k {
            let tp = self.get(c, c) as f64;
            let row = self.row_sum(c);
            let union = row + self.col_sum(c) - self.get(c, c);
            if row > 0 {
                class_acc[c] = Some(tp / row as f64);
            }
            if union > 0 {
                class_iou[c] = Some(tp / union as f64);
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Scores {
            pixel_acc: self.trace() as f64 / total as f64,
            mean_acc: mean(&class_acc),
            mean_iou: mean(&class_iou),
            class_acc,
            class_iou,
        })
    }
}
