//! Analytic parameter and FLOP accounting.
//!
//! Convention: one multiply–accumulate counts as 2 FLOPs; only conv, linear
//! and attention transforms (the EMA matmuls and its internal convolutions)
//! are counted. Normalization, activations, pooling and bias additions are
//! excluded. Parameters count learnable scalars only — batch-norm running
//! statistics are buffers, not parameters.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::TensorSpec;

use super::{LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub gflops: f64,
}

impl CostReport {
    pub fn new(params: u64, flops: u64) -> Self {
        Self { params, flops, gflops: flops as f64 / 1e9 }
    }

    /// Fractional reduction of `self` relative to `baseline`, per column.
    pub fn reduction_vs(&self, baseline: &CostReport) -> (f64, f64) {
        let p = 1.0 - self.params as f64 / baseline.params.max(1) as f64;
        let f = 1.0 - self.flops as f64 / baseline.flops.max(1) as f64;
        (p, f)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{:<12} {:>14} {:>18} {:>10}\n{:<12} {:>14} {:>18} {:>10.4}\n",
            "", "Params", "FLOPs", "GFLOPs", "model", self.params, self.flops, self.gflops
        )
    }
}

/// Exact learnable-scalar count.
pub fn count_params(graph: &ModelGraph) -> u64 {
    graph.learnable_param_count()
}

/// 2 x multiply–accumulates for one forward pass at the given input shape.
pub fn count_flops(graph: &ModelGraph, input: &TensorSpec) -> Result<u64> {
    let shapes = graph.infer_shapes(input)?;
    let mut macs: u64 = 0;
    for (idx, layer) in graph.layers().iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel, groups, .. } => {
                let [n, _, ho, wo] = shapes[idx];
                macs += (n * (in_channels / groups) * kernel * kernel * out_channels * ho * wo) as u64;
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let [n, _, _, _] = shapes[idx];
                macs += (n * in_features * out_features) as u64;
            }
            LayerKind::Ema { channels, groups } => {
                let [n, _, h, w] = shapes[idx];
                let cpg = channels / groups;
                let per_group = cpg * cpg * (h + w)      // shared 1x1 fuse
                    + cpg * cpg * 9 * h * w              // 3x3 branch
                    + 2 * cpg * h * w; // two cross-branch aggregations
                macs += (n * groups * per_group) as u64;
            }
            _ => {}
        }
    }
    Ok(2 * macs)
}

pub fn cost_report(graph: &ModelGraph, input: &TensorSpec) -> Result<CostReport> {
    Ok(CostReport::new(count_params(graph), count_flops(graph, input)?))
}
