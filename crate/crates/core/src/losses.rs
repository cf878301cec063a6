//! Classification and embedding objectives with their analytic gradients.
//!
//! The embedding loss is `alpha * sum_j w_j ||v - u_j||^2` where the targets
//! `u_j` are (optionally projected) in-class neighbor representations and the
//! weights lie on the simplex. With identity projection it is the plain
//! deep over-sampling loss.

use crate::error::{Error, Result};

pub const PROBABILITY_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// `-ln p_y` with `p_y` floored at [`PROBABILITY_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], class: usize) -> Result<f64> {
    if class >= probabilities.len() {
        return Err(Error::invalid(format!(
            "class {class} outside a {}-way distribution",
            probabilities.len()
        )));
    }
    let sum: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::invalid("not a probability distribution"));
    }
    Ok(-probabilities[class].max(PROBABILITY_FLOOR).ln())
}

/// `-ln softmax(z)_y` through log-sum-exp; unbounded, unlike the floored form.
pub fn cross_entropy_from_logits(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::invalid(format!(
            "class {class} outside a {}-way distribution",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

fn check_embedding_args(v: &[f64], targets: &[Vec<f64>], weights: &[f64]) -> Result<()> {
    if targets.len() != weights.len() || targets.is_empty() {
        return Err(Error::invalid(format!(
            "{} targets against {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != v.len()) {
        return Err(Error::invalid(format!(
            "target of length {} against representation of length {}",
            t.len(),
            v.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid(format!("weights must lie on the simplex (sum {sum})")));
    }
    Ok(())
}

/// `alpha * sum_j w_j ||v - u_j||^2`.
pub fn embedding_loss(v: &[f64], targets: &[Vec<f64>], weights: &[f64], alpha: f64) -> Result<f64> {
    check_embedding_args(v, targets, weights)?;
    let total: f64 = targets
        .iter()
        .zip(weights)
        .map(|(u, w)| w * crate::linalg::squared_distance(v, u))
        .sum();
    Ok(alpha * total)
}

/// `2 alpha sum_j w_j (v - u_j)`.
pub fn embedding_loss_grad(
    v: &[f64],
    targets: &[Vec<f64>],
    weights: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    check_embedding_args(v, targets, weights)?;
    let mut g = vec![0.0; v.len()];
    for (u, w) in targets.iter().zip(weights) {
        for ((gi, vi), ui) in g.iter_mut().zip(v).zip(u) {
            *gi += w * (vi - ui);
        }
    }
    g.iter_mut().for_each(|x| *x *= 2.0 * alpha);
    Ok(g)
}

/// Unprojected neighbor loss `sum_j w_j ||v - n_j||^2` (no trade-off factor).
pub fn dos_embedding_loss(v: &[f64], raw_targets: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    embedding_loss(v, raw_targets, weights, 1.0)
}

/// Weighted centroid `sum_j w_j u_j`, the unique minimizer of the embedding loss.
pub fn weighted_centroid(targets: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let d = targets.first().map_or(0, Vec::len);
    let mut c = vec![0.0; d];
    for (u, w) in targets.iter().zip(weights) {
        for (ci, ui) in c.iter_mut().zip(u) {
            *ci += w * ui;
        }
    }
    c
}

/// Batch losses, each a mean over its tuples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub classification_loss: f64,
    /// Already scaled by alpha.
    pub embedding_loss: f64,
    pub per_sample_classification: Vec<f64>,
    pub per_sample_embedding: Vec<f64>,
}

impl LossReport {
    pub fn from_samples(classification: Vec<f64>, embedding: Vec<f64>) -> Self {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        LossReport {
            classification_loss: mean(&classification),
            embedding_loss: mean(&embedding),
            per_sample_classification: classification,
            per_sample_embedding: embedding,
        }
    }
}
