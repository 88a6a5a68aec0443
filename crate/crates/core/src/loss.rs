//! Joint segmentation and edge objective.

use crate::autodiff::{Tape, Var};
use crate::conditioning::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_BETA: f64 = 0.6;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const WEIGHT_RANGE: (f64, f64) = (0.5, 10.0);

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    pub fn new(beta: f64, gamma: f64, class_weights: Vec<f64>) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Contract(format!("beta must be positive, got {beta}")));
        }
        if class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Contract("class weights must be finite and positive".into()));
        }
        Ok(Self {
            beta,
            gamma,
            class_weights,
        })
    }

    pub fn uniform(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            class_weights: vec![1.0; NUM_CLASSES],
        }
    }
}

/// Inverse-frequency weights `total / (K * count)`, clamped to
/// [`WEIGHT_RANGE`]. Unseen classes get the upper clamp.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                WEIGHT_RANGE.1
            } else {
                (total as f64 / (k * c as f64)).clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub seg: Var,
    pub edge: Var,
}

/// `L = weighted_ce(seg) + beta * focal(edge)`.
pub fn total_loss<R: Real>(
    tape: &mut Tape<R>,
    seg_logits: Var,
    labels: &[usize],
    edge_logits: Var,
    edges: &[bool],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let weights: Vec<R> = cfg.class_weights.iter().map(|&w| R::lit(w)).collect();
    let seg = tape.weighted_ce(seg_logits, labels, &weights)?;
    let edge = tape.focal(edge_logits, edges, R::lit(cfg.gamma))?;
    let scaled = tape.scale(edge, R::lit(cfg.beta))?;
    let total = tape.add(seg, scaled)?;
    Ok(LossParts { total, seg, edge })
}
