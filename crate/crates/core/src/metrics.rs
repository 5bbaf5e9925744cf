//! Evaluation arithmetic for backends against annotated ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{map_label, AnnotatedImage};
use crate::detectors::{DetectionClass, DetectionSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("confusion matrix needs at least one sample")]
    Empty,
    #[error("prediction for {pred} compared against annotations of {truth}")]
    Provenance { pred: String, truth: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

pub fn confusion(preds: &[bool], labels: &[bool]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: DetectionClass,
    pub predicted: u32,
    pub truth: u32,
    /// `predicted - truth`.
    pub signed: i64,
    pub abs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatch {
    pub image: String,
    pub per_class: Vec<ClassDelta>,
}

impl CountMatch {
    pub fn delta(&self, class: DetectionClass) -> &ClassDelta {
        self.per_class
            .iter()
            .find(|d| d.class == class)
            .expect("every class is present")
    }

    pub fn total_abs(&self) -> u64 {
        self.per_class.iter().map(|d| d.abs).sum()
    }
}

fn same_image(a: &str, b: &str) -> bool {
    fn stem(s: &str) -> &str {
        s.rsplit_once('.').map(|(h, _)| h).filter(|h| !h.is_empty()).unwrap_or(s)
    }
    a == b || stem(a) == stem(b)
}

/// Per-class count agreement between predictions and annotations. Regions
/// whose label is outside the class set do not count toward the truth.
pub fn count_match_score(pred: &DetectionSet, truth: &AnnotatedImage) -> Result<CountMatch, MetricsError> {
    if !same_image(&pred.image, &truth.filename) {
        return Err(MetricsError::Provenance {
            pred: pred.image.clone(),
            truth: truth.filename.clone(),
        });
    }
    let per_class = DetectionClass::ALL
        .iter()
        .map(|&class| {
            let predicted = pred.count(class) as u32;
            let truth = truth
                .regions
                .iter()
                .filter(|r| map_label(&r.class_label) == Some(class))
                .count() as u32;
            let signed = predicted as i64 - truth as i64;
            ClassDelta {
                class,
                predicted,
                truth,
                signed,
                abs: signed.unsigned_abs(),
            }
        })
        .collect();
    Ok(CountMatch {
        image: truth.filename.clone(),
        per_class,
    })
}
