//! Confusion-matrix based per-class IoU / mIoU and the label-efficiency
//! summary.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::synthdata::IGNORE_LABEL;

/// Square count matrix; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count `(gt, pred)` label pairs, skipping ignore pixels.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::logic("prediction and label maps differ in size"));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if (g as usize) >= c || (p as usize) >= c {
                return Err(CoreError::logic(format!(
                    "label out of range: gt {g}, pred {p}, classes {c}"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Matrices from parallel shards merge by addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }
}

/// Per-class IoU (`NaN` for classes absent from both sides) and the mean
/// over present classes (`NaN` when no class is present at all).
pub fn iou(cm: &ConfusionMatrix) -> (Vec<f64>, f64) {
    let c = cm.num_classes;
    let mut per_class = vec![f64::NAN; c];
    let mut sum = 0.0;
    let mut included = 0usize;
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        let denom = row + col - tp;
        if denom == 0 {
            continue;
        }
        let v = tp as f64 / denom as f64;
        per_class[k] = v;
        sum += v;
        included += 1;
    }
    let mean = if included == 0 {
        f64::NAN
    } else {
        sum / included as f64
    };
    (per_class, mean)
}

/// Smallest reported labeled fraction whose mIoU reaches 95% of the
/// reference; `None` when no report does.
pub fn efficiency_summary(
    reports: &[(f64, f64)],
    reference_miou: f64,
) -> Result<Option<f64>> {
    if reports.is_empty() {
        return Err(CoreError::logic("efficiency summary needs at least one report"));
    }
    let bar = 0.95 * reference_miou;
    Ok(reports
        .iter()
        .filter(|&&(_, miou)| miou >= bar)
        .map(|&(fraction, _)| fraction)
        .fold(None, |best: Option<f64>, f| {
            Some(best.map_or(f, |b| if f < b { f } else { b }))
        }))
}
