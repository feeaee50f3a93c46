//! Pixel confusion matrices, per-class IoU and mIoU.

use serde::{Deserialize, Serialize};

use crate::domain::Mask;
use crate::error::{Error, Result};

/// `counts[gt][pred]` over scored (non-ignored) pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
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
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, ignore_index: u8) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        if let Some(&p) = pred.data.iter().find(|&&p| p as usize >= self.classes) {
            return Err(Error::InvalidArgument(format!(
                "prediction {p} outside {} classes",
                self.classes
            )));
        }
        if let Some(&g) = gt
            .data
            .iter()
            .find(|&&g| g != ignore_index && g as usize >= self.classes)
        {
            return Err(Error::InvalidArgument(format!(
                "ground truth {g} outside {} classes",
                self.classes
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore_index {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum (merging shards).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("merging matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the denominator is 0
    /// (class absent from both ground truth and prediction).
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Unweighted mean IoU over present classes.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::NoPresentClasses);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Arithmetic mean of per-domain mIoUs.
pub fn average_miou(per_domain: &[f64]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::InvalidArgument("no domains to average".into()));
    }
    Ok(per_domain.iter().sum::<f64>() / per_domain.len() as f64)
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub domain: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub average_miou: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}
