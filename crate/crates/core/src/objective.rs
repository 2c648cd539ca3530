//! Per-proposal losses: log loss, smooth L1, their multi-task sum, and the
//! sum over unrolled iterations. Gradients used by the trainer live here
//! next to the values they differentiate.

use crate::error::{Error, Result};
use crate::geometry::RegressionTarget;

/// Floor applied to the ground-truth probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
    /// `(cls, loc)` per unrolled iteration; a single entry for one sample at
    /// one iteration.
    pub per_iteration: Vec<(f64, f64)>,
}

impl LossBreakdown {
    /// Concatenates iteration breakdowns into one unrolled record.
    pub fn unrolled(iterations: &[LossBreakdown]) -> Self {
        let per_iteration: Vec<_> = iterations
            .iter()
            .flat_map(|b| b.per_iteration.iter().copied())
            .collect();
        let cls = per_iteration.iter().map(|p| p.0).sum();
        let loc = per_iteration.iter().map(|p| p.1).sum();
        Self {
            cls,
            loc,
            total: cls + loc,
            per_iteration,
        }
    }
}

pub fn log_loss(probs: &[f64], g: usize) -> Result<f64> {
    let p = probs.get(g).ok_or(Error::InvalidLabel {
        label: g,
        classes: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Derivative of [`log_loss`] with respect to each probability.
pub fn log_loss_grad(probs: &[f64], g: usize) -> Result<Vec<f64>> {
    let p = *probs.get(g).ok_or(Error::InvalidLabel {
        label: g,
        classes: probs.len(),
    })?;
    let mut grad = vec![0.0; probs.len()];
    if p > PROB_FLOOR {
        grad[g] = -1.0 / p;
    }
    Ok(grad)
}

/// Derivative of `-ln softmax(logits)[g]` with respect to the logits, given
/// the softmax output `probs`.
pub fn softmax_log_loss_grad(probs: &[f64], g: usize) -> Result<Vec<f64>> {
    if g >= probs.len() {
        return Err(Error::InvalidLabel {
            label: g,
            classes: probs.len(),
        });
    }
    let mut grad = probs.to_vec();
    grad[g] -= 1.0;
    Ok(grad)
}

fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn smooth_l1(predicted: &RegressionTarget, target: &RegressionTarget) -> f64 {
    predicted
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum()
}

/// Derivative of [`smooth_l1`] with respect to the predicted offsets.
pub fn smooth_l1_grad(predicted: &RegressionTarget, target: &RegressionTarget) -> [f64; 4] {
    let p = predicted.to_array();
    let t = target.to_array();
    std::array::from_fn(|k| smooth_l1_slope(p[k] - t[k]))
}

/// Classification loss plus, for object samples only, the localization loss
/// of the ground-truth class's offsets scaled by `loc_weight`.
///
/// `localization` pairs the predicted offsets for class `g` with the target
/// offsets; it is ignored when `g == 0`.
pub fn multitask_loss(
    probs: &[f64],
    g: usize,
    localization: Option<(&RegressionTarget, &RegressionTarget)>,
    loc_weight: f64,
) -> Result<LossBreakdown> {
    let cls = log_loss(probs, g)?;
    let loc = match (g, localization) {
        (0, _) | (_, None) => 0.0,
        (_, Some((pred, target))) => loc_weight * smooth_l1(pred, target),
    };
    Ok(LossBreakdown {
        cls,
        loc,
        total: cls + loc,
        per_iteration: vec![(cls, loc)],
    })
}

/// Sum of the per-iteration totals.
pub fn global_loss(per_iteration: &[LossBreakdown]) -> Result<f64> {
    if per_iteration.is_empty() {
        return Err(Error::NoIterations);
    }
    Ok(per_iteration.iter().map(|b| b.total).sum())
}
