//! Classification metrics: accuracy, support-weighted accuracy and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    /// Recall: correct predictions of this class over its support.
    pub acc: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `Σ_c support_c / N · recall_c`
    pub w_acc: f64,
    /// `Σ_c support_c / N · F1_c`
    pub w_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

/// `2·TP / (2·TP + FP + FN)`, defined as 0 when the class is neither
/// present nor predicted.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("cannot evaluate an empty dataset".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::Contract(format!(
                    "class index out of range for {classes} classes (predicted {p}, label {y})"
                )));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let classes = confusion.len();
        let n: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
        let mut per_class = Vec::with_capacity(classes);
        let (mut w_acc, mut w_f1) = (0.0, 0.0);
        for c in 0..classes {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let (fp, fn_) = (predicted - tp, support - tp);
            if 2 * tp + fp + fn_ == 0 {
                log::warn!("class {c} has no support and no predictions; its F1 is set to 0");
            }
            let f1 = f1_from_counts(tp, fp, fn_);
            let acc = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
            let weight = support as f64 / n as f64;
            w_acc += weight * acc;
            w_f1 += weight * f1;
            per_class.push(ClassMetrics {
                label: c,
                acc,
                f1,
                support,
            });
        }
        Self {
            accuracy: correct as f64 / n as f64,
            w_acc,
            w_f1,
            per_class,
            confusion,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
