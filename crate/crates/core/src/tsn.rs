//! Segment-based temporal classification.
//!
//! A clip is divided into `K` equal segments; one frame per segment is
//! encoded by a small 2D CNN, the per-segment features are averaged into a
//! clip-level feature, and a sigmoid head turns that into a violence
//! probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_ghost_conv, GhostConvConfig};
use crate::error::{Error, Result};
use crate::graph::exec::{self, Mode};
use crate::graph::{GraphBuilder, ModelGraph};
use crate::tensor::Tensor;

pub const FEATURE_LAYER: &str = "feature";
pub const HEAD_LAYER: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Uniformly random frame inside each segment (seeded).
    Train,
    /// Deterministic segment-center frame.
    Test,
}

/// `K` frame positions, one per segment, sorted non-decreasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentIndices {
    pub k: usize,
    pub indices: Vec<usize>,
}

/// Segment `s` covers `[floor(s*n/K), floor((s+1)*n/K))`. Test mode picks the
/// center `(lo + hi - 1) / 2`; train mode samples uniformly inside the
/// segment. Empty segments (n < K) clamp to the nearest valid index.
pub fn sample_segments(num_frames: usize, k: usize, mode: SampleMode, seed: u64) -> Result<SegmentIndices> {
    if k == 0 {
        return Err(Error::Config("segment count K must be >= 1".into()));
    }
    if num_frames == 0 {
        return Err(Error::Input("cannot sample segments from an empty clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * num_frames / k;
        let hi = (s + 1) * num_frames / k;
        let idx = if lo >= hi {
            lo.min(num_frames - 1)
        } else {
            match mode {
                SampleMode::Test => (lo + hi - 1) / 2,
                SampleMode::Train => rng.gen_range(lo..hi),
            }
        };
        indices.push(idx);
    }
    Ok(SegmentIndices { k, indices })
}

/// Element-wise mean of the per-segment features.
pub fn consensus(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Input("consensus needs at least one feature".into()))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::Input(format!(
                "feature dimension mismatch: {} vs {}",
                f.len(),
                d
            )));
        }
        for (a, v) in acc.iter_mut().zip(f.iter()) {
            *a += v;
        }
    }
    let inv = 1.0 / features.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Sigmoid classifier over the consensus feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ClassifierHead {
    /// Read the head out of an encoder graph's final linear layer.
    pub fn from_graph(graph: &ModelGraph) -> Result<Self> {
        let layer = graph
            .layer(HEAD_LAYER)
            .ok_or_else(|| Error::Graph(format!("encoder has no '{HEAD_LAYER}' layer")))?;
        let w = &layer.param("weight").unwrap().values;
        let b = layer.param("bias").map_or(0.0, |p| p.values.data()[0]);
        Ok(Self { weights: w.data().to_vec(), bias: b })
    }
}

/// `P = sigmoid(w . g + b)`, strictly inside (0, 1).
pub fn classify(g: &[f64], head: &ClassifierHead) -> Result<f64> {
    if g.len() != head.weights.len() {
        return Err(Error::Input(format!(
            "feature dimension {} does not match head dimension {}",
            g.len(),
            head.weights.len()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) || head.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite values in classifier input".into()));
    }
    let z: f64 = head.weights.iter().zip(g.iter()).map(|(w, v)| w * v).sum::<f64>() + head.bias;
    Ok(1.0 / (1.0 + (-z).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsnConfig {
    /// Number of segments.
    pub k: usize,
    /// Snippet input resolution (square).
    pub input_size: usize,
    /// Consensus feature dimension D.
    pub feature_dim: usize,
    pub width_mult: f64,
}

impl Default for TsnConfig {
    fn default() -> Self {
        // input matches the pipeline's default crop size
        Self { k: 3, input_size: 224, feature_dim: 128, width_mult: 1.0 }
    }
}

impl TsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.input_size < 32 {
            return Err(Error::Config("snippet input size must be >= 32".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        Ok(())
    }
}

/// Small ghost-block snippet encoder with global average pooling, a linear
/// feature layer and the sigmoid head on top.
pub fn build_encoder<R: Rng>(cfg: &TsnConfig, rng: &mut R) -> Result<ModelGraph> {
    cfg.validate()?;
    let w = |base: usize| ((base as f64 * cfg.width_mult).round() as usize).max(4);
    let (c1, c2, c3) = (w(12), w(24), w(48));
    let mut b = GraphBuilder::new(rng);
    let img = b.input("img", 3);
    let stem = b.conv_bn_silu("stem", &img, c1, 3, 2);
    let g1 = build_ghost_conv(&mut b, "g1", &stem, &GhostConvConfig::new(c1, c2, 3, 2), true)?;
    let g2 = build_ghost_conv(&mut b, "g2", &g1, &GhostConvConfig::new(c2, c3, 3, 2), true)?;
    let pool = b.global_avg_pool("gap", &g2);
    let feat = b.linear(FEATURE_LAYER, &pool, cfg.feature_dim, true);
    b.linear(HEAD_LAYER, &feat, 1, true);
    Ok(b.finish())
}

/// Encode one crop into its D-dimensional feature (deterministic given
/// weights; runs in eval mode).
pub fn encode_snippet(crop: &Tensor, encoder: &ModelGraph, cfg: &TsnConfig) -> Result<Vec<f64>> {
    if crop.height() != cfg.input_size || crop.width() != cfg.input_size {
        return Err(Error::Input(format!(
            "snippet must be {0}x{0}, got {1}x{2}",
            cfg.input_size,
            crop.width(),
            crop.height()
        )));
    }
    let acts = exec::forward(encoder, crop, Mode::Eval)?;
    let f = acts.by_name(encoder, FEATURE_LAYER)?;
    Ok(f.data().to_vec())
}

/// Encode a batch of crops `(K, 3, S, S)` and return one feature per row.
pub fn encode_batch(crops: &Tensor, encoder: &ModelGraph, mode: Mode) -> Result<Vec<Vec<f64>>> {
    let acts = exec::forward(encoder, crops, mode)?;
    let f = acts.by_name(encoder, FEATURE_LAYER)?;
    let [n, d, _, _] = f.shape();
    Ok((0..n).map(|i| f.data()[i * d..(i + 1) * d].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent re-derivation of the boundary rule.
    fn brute_force_test_indices(n: usize, k: usize) -> Vec<usize> {
        (0..k)
            .map(|s| {
                let lo = (s as f64 * n as f64 / k as f64).floor() as usize;
                let hi = ((s + 1) as f64 * n as f64 / k as f64).floor() as usize;
                if lo >= hi {
                    lo.min(n - 1)
                } else {
                    (lo + hi - 1) / 2
                }
            })
            .collect()
    }

    #[test]
    fn sampler_hand_cases() {
        assert_eq!(
            sample_segments(300, 3, SampleMode::Test, 0).unwrap().indices,
            vec![49, 149, 249]
        );
        assert_eq!(sample_segments(3, 3, SampleMode::Test, 0).unwrap().indices, vec![0, 1, 2]);
        assert_eq!(sample_segments(2, 3, SampleMode::Test, 0).unwrap().indices, vec![0, 0, 1]);
    }

    #[test]
    fn sampler_matches_brute_force_and_covers() {
        for n in 1..=60 {
            for k in 1..=12 {
                let got = sample_segments(n, k, SampleMode::Test, 0).unwrap();
                assert_eq!(got.indices, brute_force_test_indices(n, k), "n={n} k={k}");
                assert!(got.indices.windows(2).all(|w| w[0] <= w[1]));
                assert!(got.indices.iter().all(|&i| i < n));

                let tr = sample_segments(n, k, SampleMode::Train, 42).unwrap();
                for (s, &idx) in tr.indices.iter().enumerate() {
                    let lo = s * n / k;
                    let hi = (s + 1) * n / k;
                    if lo < hi {
                        assert!(idx >= lo && idx < hi);
                    } else {
                        assert_eq!(idx, lo.min(n - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_reproducible_and_k_zero_rejected() {
        let a = sample_segments(100, 5, SampleMode::Train, 7).unwrap();
        let b = sample_segments(100, 5, SampleMode::Train, 7).unwrap();
        assert_eq!(a, b);
        assert!(sample_segments(10, 0, SampleMode::Test, 0).is_err());
    }

    #[test]
    fn consensus_mean_cases() {
        let f = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        assert_eq!(consensus(&f).unwrap(), vec![1.0, 1.0]);
        let one = vec![vec![3.0, -1.0]];
        assert_eq!(consensus(&one).unwrap(), vec![3.0, -1.0]);
        assert!(consensus(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn consensus_permutation_invariant() {
        let f1 = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![10.0, 4.0]];
        let f2 = vec![f1[2].clone(), f1[0].clone(), f1[1].clone()];
        assert_eq!(consensus(&f1).unwrap(), consensus(&f2).unwrap());
    }

    #[test]
    fn classify_cases() {
        let head = ClassifierHead { weights: vec![0.0, 0.0], bias: 0.0 };
        assert_eq!(classify(&[1.0, -5.0], &head).unwrap(), 0.5);

        let head = ClassifierHead { weights: vec![0.0], bias: 3f64.ln() };
        assert!((classify(&[0.0], &head).unwrap() - 0.75).abs() < 1e-12);

        let head = ClassifierHead { weights: vec![1.0], bias: 0.0 };
        assert!(classify(&[20.0], &head).unwrap() > 0.999999);

        assert!(classify(&[f64::NAN], &head).is_err());
    }

    #[test]
    fn decision_invariant_under_positive_scaling() {
        let head = ClassifierHead { weights: vec![0.8, -0.3], bias: 0.1 };
        let scaled = ClassifierHead {
            weights: head.weights.iter().map(|w| w * 7.5).collect(),
            bias: head.bias * 7.5,
        };
        for g in [[0.2, 0.9], [-1.0, 0.4], [3.0, 3.0]] {
            let a = classify(&g, &head).unwrap() >= 0.5;
            let b = classify(&g, &scaled).unwrap() >= 0.5;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn encoder_feature_contract() {
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TsnConfig { input_size: 32, feature_dim: 16, ..Default::default() };
        let enc = build_encoder(&cfg, &mut rng).unwrap();
        let crop = Tensor::rand_uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let f1 = encode_snippet(&crop, &enc, &cfg).unwrap();
        let f2 = encode_snippet(&crop, &enc, &cfg).unwrap();
        assert_eq!(f1.len(), 16);
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|v| v.is_finite()));
        assert!(encode_snippet(&Tensor::zeros([1, 3, 16, 16]), &enc, &cfg).is_err());
    }
}
