//! Accuracy and ROC AUC.

use crate::error::{Error, Result};
use crate::nn::{forward, Batch, MlpArchitecture, ParamVector};

/// Fraction of rows whose argmax logit (ties to the lowest class) equals the label.
pub fn accuracy(arch: &MlpArchitecture, params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("accuracy of an empty batch"));
    }
    let pred = forward(arch, params, batch)?.argmax();
    Ok(accuracy_from_predictions(&pred, batch.labels()))
}

pub fn accuracy_from_predictions(pred: &[usize], labels: &[usize]) -> f64 {
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Mann–Whitney statistic: the fraction of (positive, negative) pairs with
/// the positive scored higher, ties counting one half.
///
/// Sort-based, `O(n log n)`.
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc labels", scores.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::config(format!(
            "auc needs binary labels, found {bad}"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("auc score is NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the pair count keeps the half-credit for ties integral.
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] == 1).count() as u64;
        let neg = group.len() as u64 - pos;
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / 2.0 / (positives as f64 * negatives as f64))
}

/// Accuracy plus, for binary tasks, AUC over the class-1 softmax probability.
pub fn accuracy_and_auc(
    arch: &MlpArchitecture,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, Option<f64>)> {
    let logits = forward(arch, params, batch)?;
    let acc = accuracy_from_predictions(&logits.argmax(), batch.labels());
    let auc = if arch.classes() == 2 {
        match auc_binary(&logits.probability(1), batch.labels()) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok((acc, auc))
}
