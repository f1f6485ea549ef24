use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification summary with MCI (label 1) as the positive class.
/// A metric whose denominator is zero is reported as 0 and flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    /// True when any metric hit a zero denominator.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Validation("cannot score an empty prediction list".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::Validation(format!(
                "labels must be 0 or 1, got prediction {p}, label {y}"
            )));
        }
        match (p, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    let mut degenerate = false;
    Ok(MetricsReport {
        acc: ratio(tp + tn, tp + tn + fp + fn_, &mut degenerate),
        sen: ratio(tp, tp + fn_, &mut degenerate),
        spe: ratio(tn, tn + fp, &mut degenerate),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, &mut degenerate),
        tp,
        tn,
        fp,
        fn_,
        degenerate,
    })
}
