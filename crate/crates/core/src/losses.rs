//! Cross-entropy, Chernoff distance and the combined fusion objective.
//!
//! These are the eager, non-recording forms. The training path records the
//! same formulas on a [`Graph`](crate::graph::Graph) via
//! [`Graph::cross_entropy`](crate::graph::Graph::cross_entropy) and
//! [`Graph::chernoff`](crate::graph::Graph::chernoff).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, usage_err, Result};
use crate::graph::chernoff_sum;
use crate::scalar::{clamped_ln, Scalar};

/// One evaluation of `total = ce + lambda * cd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub cd: f64,
    pub lambda: f64,
    pub s: f64,
}

impl LossValue {
    pub fn new(ce: f64, cd: f64, lambda: f64, s: f64) -> Self {
        Self {
            total: total_loss(ce, cd, lambda),
            ce,
            cd,
            lambda,
            s,
        }
    }
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs
        .get(label)
        .ok_or_else(|| usage_err!("label {label} out of range for {} classes", probs.len()))?;
    Ok(-clamped_ln(*p))
}

/// Mean cross-entropy over rows of a row-major `[labels.len(), n]` matrix.
pub fn cross_entropy_batch<T: Scalar>(probs: &[T], labels: &[usize]) -> Result<T> {
    if labels.is_empty() {
        return Err(usage_err!("cross-entropy over an empty batch"));
    }
    if probs.len() % labels.len() != 0 {
        return Err(dim_err!("{} probabilities for {} labels", probs.len(), labels.len()));
    }
    let width = probs.len() / labels.len();
    let mut total = T::zero();
    for (row, &l) in probs.chunks(width).zip(labels) {
        total += cross_entropy(row, l)?;
    }
    Ok(total / T::of(labels.len() as f64))
}

/// `-ln(max(Σ_i p_i^s · q_i^(1-s), 1e-12))` for distributions `p`, `q`.
pub fn chernoff_distance<T: Scalar>(p: &[T], q: &[T], s: T) -> Result<T> {
    if p.len() != q.len() {
        return Err(dim_err!(
            "chernoff distance between lengths {} and {}",
            p.len(),
            q.len()
        ));
    }
    if !(s > T::zero() && s < T::one()) {
        return Err(usage_err!("chernoff exponent {s} outside (0, 1)"));
    }
    Ok(-clamped_ln(chernoff_sum(p, q, s)))
}

pub fn total_loss<T: Scalar>(ce: T, cd: T, lambda: T) -> T {
    ce + lambda * cd
}
