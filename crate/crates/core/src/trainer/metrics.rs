//! Evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("LengthMismatch: {predictions} predictions vs {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("EmptyInput")]
    EmptyInput,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }
}

pub enum Predictions<'a> {
    Classes { predicted: &'a [usize], targets: &'a [usize] },
    Values { predicted: &'a [f64], targets: &'a [f64] },
}

pub fn compute_metrics(p: Predictions<'_>) -> Result<MetricReport, MetricsError> {
    match p {
        Predictions::Classes { predicted, targets } => classification_metrics(predicted, targets),
        Predictions::Values { predicted, targets } => regression_metrics(predicted, targets),
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch {
            predictions: a,
            targets: b,
        });
    }
    if a == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Accuracy plus unweighted macro precision/recall/F1 over the classes seen
/// in either predictions or targets.
pub fn classification_metrics(predicted: &[usize], targets: &[usize]) -> Result<MetricReport, MetricsError> {
    check_lengths(predicted.len(), targets.len())?;
    let n = targets.len() as f64;
    let correct = predicted.iter().zip(targets).filter(|(p, t)| p == t).count();
    let classes: BTreeSet<usize> = predicted.iter().chain(targets).copied().collect();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = predicted.iter().zip(targets).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let pred_c = predicted.iter().filter(|p| **p == c).count() as f64;
        let true_c = targets.iter().filter(|t| **t == c).count() as f64;
        let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let recall = if true_c > 0.0 { tp / true_c } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let k = classes.len() as f64;
    let mut report = MetricReport::default();
    report.insert("accuracy", correct as f64 / n);
    report.insert("precision_macro", p_sum / k);
    report.insert("recall_macro", r_sum / k);
    report.insert("f1_macro", f_sum / k);
    Ok(report)
}

/// MSE, MAE and r2; r2 is reported as 0.0 with a warning when the targets
/// have zero variance.
pub fn regression_metrics(predicted: &[f64], targets: &[f64]) -> Result<MetricReport, MetricsError> {
    check_lengths(predicted.len(), targets.len())?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_res: f64 = predicted.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    let mae = predicted.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mut report = MetricReport::default();
    report.insert("mse", ss_res / n);
    report.insert("mae", mae);
    if ss_tot == 0.0 {
        report.insert("r2", 0.0);
        report
            .warnings
            .push("r2 undefined for constant targets; reported as 0".into());
    } else {
        report.insert("r2", 1.0 - ss_res / ss_tot);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_example() {
        let r = classification_metrics(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap();
        assert_eq!(r.get("accuracy"), Some(0.75));
        // class 0: P=1, R=0.5, F1=2/3; class 1: P=2/3, R=1, F1=0.8
        assert!((r.get("precision_macro").unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((r.get("recall_macro").unwrap() - 0.75).abs() < 1e-15);
        assert!((r.get("f1_macro").unwrap() - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let t = [2, 0, 1, 1, 2];
        let r = classification_metrics(&t, &t).unwrap();
        assert_eq!(r.get("accuracy"), Some(1.0));
        assert_eq!(r.get("f1_macro"), Some(1.0));

        let y = [1.0, 2.0, 3.0];
        let r = regression_metrics(&y, &y).unwrap();
        assert_eq!(r.get("mse"), Some(0.0));
        assert_eq!(r.get("r2"), Some(1.0));
    }

    #[test]
    fn constant_targets_warn() {
        let r = regression_metrics(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.get("r2"), Some(0.0));
        assert_eq!(r.warnings.len(), 1);
        let r = regression_metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.get("r2"), Some(0.0));
    }

    #[test]
    fn errors() {
        assert_eq!(
            classification_metrics(&[1], &[1, 2]),
            Err(MetricsError::LengthMismatch {
                predictions: 1,
                targets: 2
            })
        );
        assert_eq!(regression_metrics(&[], &[]), Err(MetricsError::EmptyInput));
    }

    proptest! {
        #[test]
        fn bounds_hold(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = classification_metrics(&p, &t).unwrap();
            for k in ["accuracy", "precision_macro", "recall_macro", "f1_macro"] {
                let v = r.get(k).unwrap();
                prop_assert!((0.0..=1.0).contains(&v), "{} = {}", k, v);
            }
        }

        #[test]
        fn mse_nonnegative(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = regression_metrics(&p, &t).unwrap();
            prop_assert!(r.get("mse").unwrap() >= 0.0);
            prop_assert!(r.get("mae").unwrap() >= 0.0);
        }
    }
}
