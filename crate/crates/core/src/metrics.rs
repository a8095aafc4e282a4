//! Confusion matrices and accuracy / precision / recall / F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K × K` counts, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix rows must all have length {k}")));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    /// Sum of two matrices over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Shape(format!("cannot merge {} and {} classes", self.classes(), other.classes())));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        self.counts[k].iter().sum::<u64>() - self.counts[k][k]
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum::<u64>() - self.counts[k][k]
    }

    pub fn true_negatives(&self, k: usize) -> u64 {
        self.total() - self.true_positives(k) - self.false_negatives(k) - self.false_positives(k)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (i, (&p, &t)) in preds.iter().zip(labels).enumerate() {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: prediction {p} / label {t} out of range for {classes} classes"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let trace: u64 = (0..cm.classes()).map(|k| cm.get(k, k)).sum();
    Ok(trace as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the affected value defaulted to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and macro-averaged precision, recall and F1. A zero denominator
/// yields 0 and flags the class.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> ClassificationScores {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|k| {
            let tp = cm.true_positives(k);
            let precision = ratio(tp, tp + cm.false_positives(k));
            let recall = ratio(tp, tp + cm.false_negatives(k));
            let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
            ClassMetrics {
                precision: p,
                recall: r,
                f1: f1(p, r),
                support: tp + cm.false_negatives(k),
                undefined: precision.is_none() || recall.is_none(),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    ClassificationScores {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

/// Support-weighted F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let scores = precision_recall_f1(cm);
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    scores.per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64
}

/// Micro-averaged F1, which equals accuracy for single-label predictions.
pub fn micro_f1(cm: &ConfusionMatrix) -> f64 {
    let tp: u64 = (0..cm.classes()).map(|k| cm.true_positives(k)).sum();
    let fp: u64 = (0..cm.classes()).map(|k| cm.false_positives(k)).sum();
    let fn_: u64 = (0..cm.classes()).map(|k| cm.false_negatives(k)).sum();
    f1(ratio(tp, tp + fp).unwrap_or(0.0), ratio(tp, tp + fn_).unwrap_or(0.0))
}

/// Serializable metrics for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, extended: bool) -> Result<Self> {
        let scores = precision_recall_f1(cm);
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_precision: scores.macro_precision,
            macro_recall: scores.macro_recall,
            macro_f1: scores.macro_f1,
            per_class: scores.per_class,
            confusion: cm.counts().to_vec(),
            weighted_f1: extended.then(|| weighted_f1(cm)),
            micro_f1: extended.then(|| micro_f1(cm)),
        })
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(&confusion(preds, labels, classes)?, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_binary() {
        let cm = confusion(&[1, 0], &[0, 0], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1], vec![0, 0]]);
        assert_eq!(accuracy(&cm).unwrap(), 0.5);
        let s = precision_recall_f1(&cm);
        assert_eq!(s.per_class[0].precision, 1.0);
        assert_eq!(s.per_class[0].recall, 0.5);
        assert_eq!(s.per_class[1].precision, 0.0);
        assert!(s.per_class[1].undefined);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion(&labels, &labels, 3).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let s = precision_recall_f1(&cm);
        assert!(s.per_class.iter().all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!((s.macro_precision, s.macro_recall, s.macro_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_wrong_and_empty() {
        let cm = confusion(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 0.0);
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(accuracy(&empty).is_err());
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn never_predicted_class() {
        let cm = confusion(&[0, 0, 0], &[0, 1, 1], 2).unwrap();
        let s = precision_recall_f1(&cm);
        assert_eq!(s.per_class[1].precision, 0.0);
        assert_eq!(s.per_class[1].f1, 0.0);
    }

    #[test]
    fn report_json_keys() {
        let report = MetricsReport::from_predictions(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        for key in ["accuracy", "macro_precision", "macro_recall", "macro_f1", "per_class", "confusion"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("weighted_f1").is_none());
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let ext = MetricsReport::from_confusion(&cm, true).unwrap();
        assert_eq!(ext.micro_f1, Some(ext.accuracy));
    }
}
