//! Softmax and cross-entropy over rows of logits.

use crate::error::{Error, Result};

const LOG_CLAMP: f64 = 1e-12;
const NORM_TOL: f64 = 1e-6;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Row-wise softmax of a `[rows, classes]` buffer.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits.chunks(classes).flat_map(softmax).collect()
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::precondition(format!(
            "{what} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// Cross-entropy of `target` under `probs` and its gradient with respect to
/// the pre-softmax logits.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != target.len() {
        return Err(Error::precondition(format!(
            "cross entropy: {} probabilities vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    check_distribution("probabilities", probs)?;
    check_distribution("target", target)?;
    let loss = -probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.max(LOG_CLAMP).ln() })
        .sum::<f64>();
    let grad = probs.iter().zip(target).map(|(p, t)| p - t).collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over rows; the gradient is scaled by `1/rows`.
pub fn cross_entropy_rows(probs: &[f64], targets: &[f64], classes: usize) -> Result<(f64, Vec<f64>)> {
    if probs.len() != targets.len() || classes == 0 || !probs.len().is_multiple_of(classes) {
        return Err(Error::precondition(format!(
            "cross entropy: {} probabilities vs {} targets over {classes} classes",
            probs.len(),
            targets.len()
        )));
    }
    let rows = probs.len() / classes;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (p, t) in probs.chunks(classes).zip(targets.chunks(classes)) {
        let (l, g) = cross_entropy(p, t)?;
        total += l;
        grad.extend(g.into_iter().map(|v| v / rows as f64));
    }
    Ok((total / rows as f64, grad))
}

pub fn one_hot(index: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    v
}
