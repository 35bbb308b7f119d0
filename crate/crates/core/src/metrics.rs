//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};

/// Rows are truth, columns are prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_confusion",
                left: vec![truth.len()],
                right: vec![pred.len()],
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore_index {
                continue;
            }
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= self.n || t >= self.n {
                return Err(Error::config(format!(
                    "class id {} out of range for {} classes",
                    p.max(t),
                    self.n
                )));
            }
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::ClassMismatch {
                model: self.n,
                data: other.n,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, c)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticMetrics {
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
}

/// Per-class counts: true positives, false positives, false negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro averages over the foreground classes present in truth or
/// prediction. When no foreground class is present, background is used so the
/// result stays defined.
pub fn metrics_from_counts(per_class: &[ClassCounts], correct: u64, total: u64) -> Result<SemanticMetrics> {
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no pixels".into()));
    }
    let mut chosen: Vec<&ClassCounts> = per_class.iter().skip(1).filter(|c| c.present()).collect();
    if chosen.is_empty() {
        chosen = per_class.iter().take(1).filter(|c| c.present()).collect();
    }
    let k = chosen.len() as f64;
    let mean = |f: &dyn Fn(&ClassCounts) -> f64| chosen.iter().map(|c| f(c)).sum::<f64>() / k;
    let precision = mean(&|c| ratio(c.tp, c.tp + c.fp));
    let recall = mean(&|c| ratio(c.tp, c.tp + c.fn_));
    let miou = mean(&|c| ratio(c.tp, c.tp + c.fp + c.fn_));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SemanticMetrics {
        pixel_accuracy: correct as f64 / total as f64,
        precision,
        recall,
        f1,
        miou,
    })
}

pub fn semantic_metrics(cm: &ConfusionMatrix) -> Result<SemanticMetrics> {
    let per_class: Vec<ClassCounts> = (0..cm.n)
        .map(|c| {
            let tp = cm.get(c, c);
            ClassCounts {
                tp,
                fp: cm.col_sum(c) - tp,
                fn_: cm.row_sum(c) - tp,
            }
        })
        .collect();
    let correct = (0..cm.n).map(|c| cm.get(c, c)).sum();
    metrics_from_counts(&per_class, correct, cm.total())
}
