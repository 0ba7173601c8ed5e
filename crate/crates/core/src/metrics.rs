//! Confusion-matrix accumulation and per-class pixel accuracy / IoU.
//!
//! Pixel accuracy is per-class recall: the fraction of ground-truth pixels of
//! a class that were predicted as that class. Metrics are computed from the
//! matrix aggregated over a whole split, not averaged per image.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imagery::LabelMask;

/// `counts[gt][pred]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, cls: usize) -> u64 {
        self.counts[cls * self.num_classes..(cls + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, cls: usize) -> u64 {
        (0..self.num_classes).map(|g| self.count(g, cls)).sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        ensure!(
            pred.same_shape(gt.width(), gt.height()),
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        );
        ensure!(
            pred.num_classes() == self.num_classes && gt.num_classes() == self.num_classes,
            "confusion matrix has {} classes, masks have {} and {}",
            self.num_classes,
            pred.num_classes(),
            gt.num_classes()
        );
        let c = self.num_classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    fn check_class(&self, cls: usize) -> Result<()> {
        ensure!(
            cls < self.num_classes,
            "class {cls} out of range for {} classes",
            self.num_classes
        );
        Ok(())
    }

    /// Per-class recall. Errors when the class has no ground-truth pixels.
    pub fn pixel_accuracy(&self, cls: usize) -> Result<f64> {
        self.check_class(cls)?;
        let row = self.row_sum(cls);
        if row == 0 {
            return Err(Error::UndefinedMetric(format!(
                "pixel accuracy of class {cls}: no ground-truth pixels"
            )));
        }
        Ok(self.count(cls, cls) as f64 / row as f64)
    }

    /// Per-class precision. Errors when the class was never predicted.
    pub fn precision(&self, cls: usize) -> Result<f64> {
        self.check_class(cls)?;
        let col = self.col_sum(cls);
        if col == 0 {
            return Err(Error::UndefinedMetric(format!(
                "precision of class {cls}: never predicted"
            )));
        }
        Ok(self.count(cls, cls) as f64 / col as f64)
    }

    pub fn iou(&self, cls: usize) -> Result<f64> {
        self.check_class(cls)?;
        let tp = self.count(cls, cls);
        let union = self.row_sum(cls) + self.col_sum(cls) - tp;
        if union == 0 {
            return Err(Error::UndefinedMetric(format!(
                "IoU of class {cls}: empty union"
            )));
        }
        Ok(tp as f64 / union as f64)
    }

    pub fn class_metrics(&self, cls: usize) -> ClassMetrics {
        let (pa, pa_defined) = flag(self.pixel_accuracy(cls));
        let (iou, iou_defined) = flag(self.iou(cls));
        ClassMetrics {
            class: cls,
            pa,
            iou,
            pa_defined,
            iou_defined,
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            per_class: (0..self.num_classes)
                .map(|c| self.class_metrics(c))
                .collect(),
            pixel_total: self.total(),
        }
    }
}

fn flag(r: Result<f64>) -> (f64, bool) {
    match r {
        Ok(v) => (v, true),
        Err(_) => (0.0, false),
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.num_classes, rhs.num_classes, "class count mismatch");
        self.counts
            .iter_mut()
            .zip(&rhs.counts)
            .for_each(|(a, b)| *a += b);
    }
}

/// One class's metrics. Undefined metrics are reported as 0 with the
/// matching `*_defined` flag cleared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    #[serde(rename = "PA")]
    pub pa: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
    #[serde(rename = "PA_defined")]
    pub pa_defined: bool,
    #[serde(rename = "IoU_defined")]
    pub iou_defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub pixel_total: u64,
}

impl MetricsReport {
    pub fn class(&self, cls: usize) -> &ClassMetrics {
        &self.per_class[cls]
    }
}
