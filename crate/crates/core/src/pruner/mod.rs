//! Structured channel pruning.
//!
//! Channel importance is the L2 norm of everything a channel owns; the plan
//! drops the lowest-scoring channels per dependency group under a preset
//! ratio, application slices every coupled tensor, and a short fine-tuning
//! run recovers accuracy.

mod deps;
mod finetune;
mod plan;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use deps::{build_deps, Deps};
pub use finetune::finetune;
pub use plan::{apply_plan, build_plan, build_plan_scoped, plan_from_drops, PruneScope, PruningPlan};

/// Euclidean norm of one channel's weight slice.
pub fn channel_importance(weights: &[f64]) -> Result<f64> {
    importance_of(weights)
}

pub(crate) fn importance_of(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Input("empty weight slice has no importance".into()));
    }
    Ok(weights.iter().map(|w| w * w).sum::<f64>().sqrt())
}

/// One scored channel, for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub layer: String,
    pub channel: usize,
    pub score: f64,
    /// Number of weight elements contributing to the score.
    pub n: usize,
}

impl ChannelImportance {
    pub fn new(layer: &str, channel: usize, weights: &[f64]) -> Result<Self> {
        Ok(Self {
            layer: layer.to_string(),
            channel,
            score: importance_of(weights)?,
            n: weights.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pythagorean_slice() {
        assert_eq!(channel_importance(&[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn zero_slice_scores_zero() {
        assert_eq!(channel_importance(&[0.0; 12]).unwrap(), 0.0);
    }

    #[test]
    fn empty_slice_rejected() {
        assert!(channel_importance(&[]).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let w = [0.5, -1.5, 2.0, 0.25];
        let base = channel_importance(&w).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.0).collect();
        assert!((channel_importance(&scaled).unwrap() - 3.0 * base).abs() < 1e-12);
    }
}
