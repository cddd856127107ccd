//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};

/// `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(HarnessError::Contract(format!(
                "{} labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g >= self.classes || p >= self.classes {
                return Err(HarnessError::Contract(format!(
                    "class id out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn report(&self, names: &[String]) -> MetricsReport {
        let mut per_class = Vec::with_capacity(self.classes);
        let mut excluded = Vec::new();
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut correct = 0u64;
        let mut total = 0u64;
        for c in 0..self.classes {
            let tp = self.counts[c][c];
            let gt: u64 = self.counts[c].iter().sum();
            let pred: u64 = self.counts.iter().map(|row| row[c]).sum();
            let (fn_, fp) = (gt - tp, pred - tp);
            correct += tp;
            total += gt;
            let iou = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            if iou.is_none() {
                excluded.push(names[c].clone());
            }
            if gt > 0 {
                sum += iou.unwrap_or(0.0);
                n += 1;
            }
            per_class.push(ClassIou {
                name: names[c].clone(),
                iou,
                support: gt,
            });
        }
        MetricsReport {
            miou: if n == 0 { 0.0 } else { sum / n as f64 },
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
    /// Ground-truth cell count.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Unweighted mean IoU over classes present in the ground truth.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class: Vec<ClassIou>,
    /// Classes absent from both prediction and ground truth.
    pub excluded: Vec<String>,
}

/// Metrics for paired label/prediction maps.
pub fn segmentation_metrics(gt: &[Vec<usize>], pred: &[Vec<usize>], names: &[String]) -> Result<MetricsReport> {
    let mut conf = Confusion::new(names.len());
    if gt.len() != pred.len() {
        return Err(HarnessError::Contract("scene count mismatch".into()));
    }
    for (g, p) in gt.iter().zip(pred) {
        conf.add(g, p)?;
    }
    Ok(conf.report(names))
}
