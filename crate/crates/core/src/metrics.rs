//! Task metrics and time-to-target bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics snapshot emitted after each aggregation. `test_metric` is empty
/// for aggregations at which no evaluation was scheduled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sim_time: f64,
    pub global_iter: u64,
    pub train_loss: f64,
    pub test_metric: BTreeMap<String, f64>,
    pub strategy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub smape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub balanced_accuracy: f64,
}

impl RegressionMetrics {
    pub fn to_map(self) -> BTreeMap<String, f64> {
        BTreeMap::from([("mae".to_string(), self.mae), ("smape".to_string(), self.smape)])
    }
}

impl ClassificationMetrics {
    pub fn to_map(self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("accuracy".to_string(), self.accuracy),
            ("f1".to_string(), self.f1),
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
            ("balanced_accuracy".to_string(), self.balanced_accuracy),
        ])
    }
}

/// Whether larger values of the named metric are better.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "mae" | "smape" | "loss")
}

/// MAE and symmetric MAPE (`|p - y| / ((|p| + |y|) / 2)`, `0/0 := 0`).
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    let n = preds.len() as f64;
    let mut mae = 0.0;
    let mut smape = 0.0;
    for (&p, &y) in preds.iter().zip(targets) {
        let err = (p - y).abs();
        mae += err;
        let denom = (p.abs() + y.abs()) / 2.0;
        if denom > 0.0 {
            smape += err / denom;
        }
    }
    Ok(RegressionMetrics { mae: mae / n, smape: smape / n })
}

/// Accuracy plus macro-averaged F1, precision and recall, and balanced
/// accuracy over the classes present in the targets. A class with no
/// predicted members has precision 0.
pub fn classification_metrics(preds: &[usize], targets: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    if let Some(&bad) = preds.iter().chain(targets).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(targets) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut present = 0usize;
    for (c, row) in confusion.iter().enumerate() {
        let actual: usize = row.iter().sum();
        if actual == 0 {
            continue;
        }
        present += 1;
        let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
        let tp = row[c] as f64;
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = tp / actual as f64;
        precision += p;
        recall += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let k = present as f64;
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        f1: f1 / k,
        precision: precision / k,
        recall: recall / k,
        balanced_accuracy: recall / k,
    })
}

/// First simulated time at which `metric` meets or beats `target`.
/// Records lacking the metric are skipped.
pub fn time_to_target(records: &[RunRecord], metric: &str, target: f64) -> Option<f64> {
    let better = higher_is_better(metric);
    records.iter().find_map(|r| {
        let v = *r.test_metric.get(metric)?;
        let hit = if better { v >= target } else { v <= target };
        hit.then_some(r.sim_time)
    })
}

/// Last evaluated value of `metric`.
pub fn final_metric(records: &[RunRecord], metric: &str) -> Option<f64> {
    records.iter().rev().find_map(|r| r.test_metric.get(metric).copied())
}
