//! Binary confusion matrices and precision/recall/F1/accuracy, with either
//! outcome treated as the positive class.
//!
//! Metrics whose denominator is zero are `None` rather than a number.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no predictions to score")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub positive_class: Label,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Same predictions scored with the other class as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
            positive_class: self.positive_class.other(),
        }
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label], positive_class: Label) -> Result<ConfusionMatrix, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut cm = ConfusionMatrix { tp: 0, fp: 0, tn: 0, fn_: 0, positive_class };
    for (&pred, &actual) in predictions.iter().zip(labels) {
        match (actual == positive_class, pred == positive_class) {
            (true, true) => cm.tp += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn precision(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp as f64, (cm.tp + cm.fp) as f64)
}

pub fn recall(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp as f64, (cm.tp + cm.fn_) as f64)
}

pub fn f1(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp as f64, cm.tp as f64 + 0.5 * (cm.fp + cm.fn_) as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Option<f64> {
    ratio((cm.tp + cm.tn) as f64, cm.total() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub positive_class: Label,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_test: usize,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self {
            positive_class: cm.positive_class,
            precision: precision(cm),
            recall: recall(cm),
            f1: f1(cm),
            accuracy: accuracy(cm),
            n_test: cm.total(),
        }
    }

    /// Report with every metric undefined, for cells that could not be scored.
    pub fn undefined(positive_class: Label, n_test: usize) -> Self {
        Self { positive_class, precision: None, recall: None, f1: None, accuracy: None, n_test }
    }

    pub fn n_undefined(&self) -> usize {
        [self.precision, self.recall, self.f1, self.accuracy].iter().filter(|m| m.is_none()).count()
    }
}

/// Recovery-positive and collapse-positive reports from one pass.
pub fn dual_report(predictions: &[Label], labels: &[Label]) -> Result<(MetricReport, MetricReport), MetricError> {
    let recovery = confusion(predictions, labels, Label::Recovery)?;
    Ok((MetricReport::from_confusion(&recovery), MetricReport::from_confusion(&recovery.swapped())))
}
