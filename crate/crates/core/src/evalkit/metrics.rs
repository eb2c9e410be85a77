use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// `2ab / (a + b)`, and 0 when both are 0.
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    if acc_s + acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_s * acc_u / (acc_s + acc_u)
    }
}

/// Fraction of correct predictions per class, over samples whose label is
/// in `class_set`. Every class in `class_set` must have at least one sample.
pub fn per_class_accuracy(
    predictions: &[usize],
    labels: &[usize],
    class_set: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("per_class_accuracy", predictions.len(), labels.len()));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some((correct, total)) = counts.get_mut(&y) {
            *correct += (p == y) as usize;
            *total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, (correct, total))| {
            if total == 0 {
                Err(Error::Protocol(format!("class {c} has no samples to score")))
            } else {
                Ok((c, correct as f64 / total as f64))
            }
        })
        .collect()
}

/// Unweighted mean of the per-class accuracies.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::Protocol("mean class accuracy over an empty class set".into()));
    }
    let per_class = per_class_accuracy(predictions, labels, class_set)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}
