//! Consistency-based semi-supervised training with a pluggable
//! confidence-threshold schedule.
//!
//! A weakly augmented view of each unlabeled image yields a pseudo-label;
//! the strongly augmented view is trained towards it only when the
//! weak-view confidence clears the schedule's current threshold.

pub mod augment;
mod train;

pub use augment::{AugmentationSpec, Transform};
pub use train::{
    evaluate, read_metrics_csv, train_run, train_step, train_step_with_threshold, write_metrics_csv,
    Evaluation, RunOutput, RunRecord, SslModel, StepBatch, StepStats, TrainConfig, METRICS_HEADER,
};

use crate::numerics::{Graph, Var};
use crate::{Error, Result};

/// Tolerance on `Σ probs = 1` accepted by [`pseudo_label`].
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelDecision {
    pub max_prob: f64,
    pub argmax_class: usize,
    pub accepted: bool,
    pub threshold_used: f64,
}

/// Argmax with lowest-index tie-break; accepted iff `max ≥ threshold`.
pub fn pseudo_label(probs: &[f64], threshold: f64) -> Result<PseudoLabelDecision> {
    if probs.is_empty() {
        return Err(Error::Contract("empty probability vector".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract(format!("malformed probabilities {probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
    }
    let (argmax_class, max_prob) = probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, probs[0]), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    Ok(PseudoLabelDecision {
        max_prob,
        argmax_class,
        accepted: max_prob >= threshold,
        threshold_used: threshold,
    })
}

/// Unsupervised loss over the full unlabeled batch: accepted items
/// contribute `CE(strong_logits, pseudo_class)`, rejected ones 0, and the
/// sum is divided by `Bu`. Returns the loss node and the mask rate.
///
/// `weak_probs` is a row-major `Bu×C` buffer computed without gradients.
pub fn consistency_loss(
    g: &mut Graph,
    weak_probs: &[f64],
    strong_logits: Var,
    threshold: f64,
) -> Result<(Var, f64)> {
    let (bu, c) = match *g.shape(strong_logits) {
        [bu, c] => (bu, c),
        ref s => return Err(Error::dim("consistency_loss", s, &[weak_probs.len(), 0])),
    };
    if bu == 0 {
        return Err(Error::Contract("consistency_loss over an empty unlabeled batch".into()));
    }
    if weak_probs.len() != bu * c {
        return Err(Error::dim("consistency_loss", &[bu, c], &[weak_probs.len()]));
    }
    let mut targets = Vec::with_capacity(bu);
    let mut weights = Vec::with_capacity(bu);
    for row in weak_probs.chunks_exact(c) {
        let d = pseudo_label(row, threshold)?;
        targets.push(d.argmax_class);
        weights.push(if d.accepted { 1.0 } else { 0.0 });
    }
    let mask_rate = weights.iter().sum::<f64>() / bu as f64;
    let loss = g.weighted_cross_entropy(strong_logits, &targets, &weights)?;
    Ok((loss, mask_rate))
}
