//! Evaluation metrics: accuracy, macro-F1, one-vs-all EER and the confusion
//! matrix, gathered into a [`MetricsReport`].

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, usage_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean over classes with a defined EER; `None` when no class has one.
    pub eer_avg: Option<f64>,
    /// `None` for classes without positives (or without negatives).
    pub eer_per_class: Vec<Option<f64>>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// Computes every metric from a row-major `[N, n_classes]` posterior matrix.
    pub fn from_posteriors<T: Scalar>(
        scores: &[T],
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(usage_err!("cannot evaluate an empty set"));
        }
        if scores.len() != labels.len() * n_classes {
            return Err(dim_err!(
                "{} scores for {} samples of {n_classes} classes",
                scores.len(),
                labels.len()
            ));
        }
        let preds: Vec<usize> = scores
            .chunks(n_classes)
            .map(crate::tensor::kernels::argmax)
            .collect();
        let eer = eer_one_vs_all(scores, labels, n_classes)?;
        Ok(Self {
            accuracy: accuracy(&preds, labels)?,
            macro_f1: macro_f1(&preds, labels, n_classes)?,
            eer_avg: eer.average,
            eer_per_class: eer.per_class,
            confusion: confusion_matrix(&preds, labels, n_classes)?,
            warnings: eer.warnings,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(usage_err!("metric over empty input"));
    }
    if preds.len() != labels.len() {
        return Err(dim_err!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `confusion[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(preds, labels)?;
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(usage_err!("class index out of range for {n_classes} classes"));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(preds, labels, n_classes)?;
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = cm[c][c] as f64;
        let predicted: u64 = cm.iter().map(|row| row[c]).sum();
        let actual: u64 = cm[c].iter().sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / n_classes as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EerResult {
    pub average: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// One-vs-all equal error rate per class plus the mean over defined classes.
///
/// For class `c`, rows labelled `c` are positives and all other rows are
/// negatives, both scored by column `c`; a row is accepted when its score is
/// at least the threshold.
pub fn eer_one_vs_all<T: Scalar>(scores: &[T], labels: &[usize], n_classes: usize) -> Result<EerResult> {
    if labels.is_empty() {
        return Err(usage_err!("EER over empty input"));
    }
    if scores.len() != labels.len() * n_classes {
        return Err(dim_err!("score matrix does not match {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(usage_err!("label {bad} out of range for {n_classes} classes"));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut warnings = Vec::new();
    for c in 0..n_classes {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (row, &l) in scores.chunks(n_classes).zip(labels) {
            let s = row[c].to_f64_lossy();
            if l == c {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        match binary_eer(&pos, &neg) {
            Some(e) => per_class.push(Some(e)),
            None => {
                let side = if pos.is_empty() { "positives" } else { "negatives" };
                warnings.push(format!("class {c} has no {side}; EER undefined and excluded from average"));
                per_class.push(None);
            }
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(EerResult {
        average,
        per_class,
        warnings,
    })
}

/// EER of a two-set score split, linearly interpolated between the two
/// thresholds bracketing the FAR/FRR crossing. `None` if either set is empty.
pub fn binary_eer(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);

    // Threshold at the lowest score: everything accepted.
    let mut rejected_pos = 0usize;
    let mut rejected_neg = 0usize;
    let mut prev = (1.0, 0.0); // (far, frr)
    let mut i = 0;
    loop {
        let (far, frr) = prev;
        let diff = frr - far;
        if diff >= 0.0 {
            return Some(far);
        }
        // Advance the threshold past the current run of equal scores.
        if i >= all.len() {
            unreachable!("FRR reaches 1 once every score is rejected");
        }
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
        let next = ((nn - rejected_neg as f64) / nn, rejected_pos as f64 / np);
        let next_diff = next.1 - next.0;
        if next_diff > 0.0 {
            let alpha = -diff / (next_diff - diff);
            return Some(far + alpha * (next.0 - far));
        }
        prev = next;
    }
}
