//! Confusion-matrix based segmentation metrics.

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Rows are ground-truth classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates every pixel whose ground truth is not ignored.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(
                "confusion matrix",
                &[pred.height(), pred.width()],
                &[gt.height(), gt.width()],
            ));
        }
        gt.validate(self.num_classes)?;
        let k = self.num_classes;
        for (idx, (&p, &t)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if gt.is_ignored(idx) {
                continue;
            }
            if p < 0 || p as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: p,
                    row: idx / pred.width(),
                    col: idx % pred.width(),
                    num_classes: k,
                });
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion merge", &[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn require_pixels(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::Degenerate("no valid pixels to score".into())),
            n => Ok(n),
        }
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.require_pixels()?;
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// IoU per class; `None` for classes absent from both ground truth and
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..self.num_classes).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.num_classes).map(|t| self.get(t, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur in ground truth or prediction.
    pub fn mean_iou(&self) -> Result<f64> {
        self.require_pixels()?;
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn pix_acc(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<f64> {
    confusion(pred, gt, num_classes)?.pixel_accuracy()
}

pub fn mean_iou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<f64> {
    confusion(pred, gt, num_classes)?.mean_iou()
}

pub fn confusion(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[gt.len()]));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in pred.iter().zip(gt) {
        cm.update(p, t)?;
    }
    Ok(cm)
}
