//! Single-class anchor-free person detector.
//!
//! A small stride-8 backbone (standard or ghost blocks, optional EMA
//! attention on the last stage) feeds a decoupled head: a 4-channel
//! box-distance map and a 1-channel objectness map. Decoding turns each grid
//! cell into a box via softplus-positive left/top/right/bottom distances.

pub mod bbox;
pub mod metrics;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_c3_standard, build_c3ghost, build_ghost_conv, C3GhostConfig, GhostConvConfig};
use crate::error::{Error, Result};
use crate::graph::exec::{self, Mode};
use crate::graph::{GraphBuilder, ModelGraph};
use crate::tensor::Tensor;

pub use bbox::{iou, nms, BoundingBox, Detections};
pub use metrics::{eval_detection, DetectionMetrics};

pub const BOX_LAYER: &str = "head.box";
pub const SCORE_LAYER: &str = "head.score";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Score threshold applied at decode time.
    pub confidence: f64,
    pub nms_iou: f64,
    /// Square inference resolution; must be a multiple of 32.
    pub input_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { width_mult: 1.0, depth_mult: 1.0, confidence: 0.25, nms_iou: 0.45, input_size: 256 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("detector thresholds must be in [0,1]".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.width_mult <= 0.0 || self.depth_mult <= 0.0 {
            return Err(Error::Config("multipliers must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        (((base as f64 * self.width_mult) / 4.0).round() as usize * 4).max(8)
    }

    fn depth(&self) -> usize {
        (self.depth_mult.round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Standard,
    Ghost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    None,
    Ema,
}

/// A registry name like `"standard"`, `"ghost"` or `"ghost+ema"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorVariant {
    pub backbone: Backbone,
    pub attention: Attention,
}

impl DetectorVariant {
    pub const STANDARD: Self = Self { backbone: Backbone::Standard, attention: Attention::None };
    pub const GHOST: Self = Self { backbone: Backbone::Ghost, attention: Attention::None };
    pub const GHOST_EMA: Self = Self { backbone: Backbone::Ghost, attention: Attention::Ema };
}

impl FromStr for DetectorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut backbone = None;
        let mut attention = Attention::None;
        for part in s.split('+') {
            match part.trim() {
                "standard" => backbone = Some(Backbone::Standard),
                "ghost" => backbone = Some(Backbone::Ghost),
                "ema" => attention = Attention::Ema,
                other => {
                    return Err(Error::Config(format!(
                        "unknown variant component '{other}' (expected standard|ghost|ema)"
                    )))
                }
            }
        }
        let backbone = backbone
            .ok_or_else(|| Error::Config(format!("variant '{s}' names no backbone")))?;
        Ok(Self { backbone, attention })
    }
}

impl std::fmt::Display for DetectorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = match self.backbone {
            Backbone::Standard => "standard",
            Backbone::Ghost => "ghost",
        };
        match self.attention {
            Attention::None => write!(f, "{b}"),
            Attention::Ema => write!(f, "{b}+ema"),
        }
    }
}

/// Backbone stride of the (single) detection head.
pub const HEAD_STRIDE: usize = 8;

pub fn build_detector<R: Rng>(cfg: &DetectorConfig, variant: DetectorVariant, rng: &mut R) -> Result<ModelGraph> {
    cfg.validate()?;
    let (c1, c2, c3) = (cfg.width(16), cfg.width(32), cfg.width(64));
    let depth = cfg.depth();
    let ghost = matches!(variant.backbone, Backbone::Ghost);

    let mut b = GraphBuilder::new(rng);
    let img = b.input("img", 3);
    let stem = b.conv_bn_silu("stem", &img, c1, 3, 2);

    let down1 = if ghost {
        build_ghost_conv(&mut b, "b1.down", &stem, &GhostConvConfig::new(c1, c2, 3, 2), true)?
    } else {
        b.conv_bn_silu("b1.down", &stem, c2, 3, 2)
    };
    let blk1_cfg = C3GhostConfig { in_channels: c2, out_channels: c2, depth, residual: false };
    let stage1 = if ghost {
        build_c3ghost(&mut b, "b1.blk", &down1, &blk1_cfg)?
    } else {
        build_c3_standard(&mut b, "b1.blk", &down1, &blk1_cfg)?
    };

    let down2 = if ghost {
        build_ghost_conv(&mut b, "b2.down", &stage1, &GhostConvConfig::new(c2, c3, 3, 2), true)?
    } else {
        b.conv_bn_silu("b2.down", &stage1, c3, 3, 2)
    };
    let blk2_cfg = C3GhostConfig { in_channels: c3, out_channels: c3, depth, residual: true };
    let stage2 = if ghost {
        build_c3ghost(&mut b, "b2.blk", &down2, &blk2_cfg)?
    } else {
        build_c3_standard(&mut b, "b2.blk", &down2, &blk2_cfg)?
    };

    let feat = match variant.attention {
        Attention::Ema => b.ema("att.ema", &stage2, 4),
        Attention::None => stage2,
    };

    let head = if ghost {
        build_ghost_conv(&mut b, "head.stem", &feat, &GhostConvConfig::new(c3, c3, 3, 1), true)?
    } else {
        b.conv_bn_silu("head.stem", &feat, c3, 3, 1)
    };
    b.conv(BOX_LAYER, &head, 4, 1, 1, 1, true);
    b.conv(SCORE_LAYER, &head, 1, 1, 1, 1, true);

    let mut graph = b.finish();
    // start the objectness head pessimistic so early training is stable
    if let Some(p) = graph.layer_mut(SCORE_LAYER).and_then(|l| l.param_mut("bias")) {
        p.values.data_mut()[0] = -2.0;
    }
    Ok(graph)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Decode head maps into frame-coordinate boxes (no NMS, no sorting).
fn decode(
    score_logits: &Tensor,
    box_raw: &Tensor,
    confidence: f64,
    model_size: usize,
    frame_w: usize,
    frame_h: usize,
) -> Vec<BoundingBox> {
    let [_, _, hs, ws] = score_logits.shape();
    let stride_y = model_size as f64 / hs as f64;
    let stride_x = model_size as f64 / ws as f64;
    let sx = frame_w as f64 / model_size as f64;
    let sy = frame_h as f64 / model_size as f64;
    let mut out = Vec::new();
    for gy in 0..hs {
        for gx in 0..ws {
            let p = 1.0 / (1.0 + (-score_logits.at(0, 0, gy, gx)).exp());
            if p < confidence {
                continue;
            }
            let cx = (gx as f64 + 0.5) * stride_x;
            let cy = (gy as f64 + 0.5) * stride_y;
            let l = softplus(box_raw.at(0, 0, gy, gx)) * stride_x;
            let t = softplus(box_raw.at(0, 1, gy, gx)) * stride_y;
            let r = softplus(box_raw.at(0, 2, gy, gx)) * stride_x;
            let bo = softplus(box_raw.at(0, 3, gy, gx)) * stride_y;
            let cand = BoundingBox {
                x1: (cx - l) * sx,
                y1: (cy - t) * sy,
                x2: (cx + r) * sx,
                y2: (cy + bo) * sy,
                score: p,
            };
            if let Some(clipped) = cand.clipped(frame_w as f64, frame_h as f64) {
                out.push(clipped);
            }
        }
    }
    out
}

/// Run the detector on one frame `(1, 3, H, W)`. Output boxes are in frame
/// pixel coordinates, thresholded, NMS-suppressed and sorted by score.
pub fn detect(frame: &Tensor, model: &ModelGraph, cfg: &DetectorConfig, frame_index: usize) -> Result<Detections> {
    cfg.validate()?;
    let [n, c, h, w] = frame.shape();
    if n != 1 || c != 3 {
        return Err(Error::Input(format!("expected (1,3,H,W) frame, got {:?}", frame.shape())));
    }
    if h < 32 || w < 32 {
        return Err(Error::Input(format!("frame {w}x{h} below the 32x32 minimum")));
    }
    if !frame.is_all_finite() {
        return Err(Error::Input("non-finite pixel values".into()));
    }
    let resized = frame.resize_bilinear(cfg.input_size, cfg.input_size);
    let acts = exec::forward(model, &resized, Mode::Eval)?;
    let scores = acts.by_name(model, SCORE_LAYER)?;
    let boxes_raw = acts.by_name(model, BOX_LAYER)?;
    let raw = decode(scores, boxes_raw, cfg.confidence, cfg.input_size, w, h);
    let boxes = nms(&raw, cfg.nms_iou);
    Ok(Detections { frame_index, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_registry_parses() {
        assert_eq!("ghost+ema".parse::<DetectorVariant>().unwrap(), DetectorVariant::GHOST_EMA);
        assert_eq!("standard".parse::<DetectorVariant>().unwrap(), DetectorVariant::STANDARD);
        assert!("resnet".parse::<DetectorVariant>().is_err());
    }

    #[test]
    fn untrained_model_threshold_one_yields_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DetectorConfig { input_size: 64, confidence: 1.0, ..Default::default() };
        let model = build_detector(&cfg, DetectorVariant::GHOST_EMA, &mut rng).unwrap();
        let frame = Tensor::zeros([1, 3, 64, 64]);
        let det = detect(&frame, &model, &cfg, 7).unwrap();
        assert_eq!(det.count(), 0);
        assert_eq!(det.frame_index, 7);
    }

    #[test]
    fn detect_is_deterministic_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DetectorConfig { input_size: 64, confidence: 0.05, ..Default::default() };
        let model = build_detector(&cfg, DetectorVariant::GHOST, &mut rng).unwrap();
        let frame = Tensor::rand_uniform([1, 3, 80, 60], 0.0, 1.0, &mut rng);
        let a = detect(&frame, &model, &cfg, 0).unwrap();
        let b = detect(&frame, &model, &cfg, 0).unwrap();
        assert_eq!(a, b);
        for pair in a.boxes.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for bx in &a.boxes {
            assert!(bx.score >= cfg.confidence);
            assert!(bx.x1 >= 0.0 && bx.x2 <= 60.0 && bx.y1 >= 0.0 && bx.y2 <= 80.0);
        }
    }

    #[test]
    fn rejects_tiny_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DetectorConfig { input_size: 64, ..Default::default() };
        let model = build_detector(&cfg, DetectorVariant::STANDARD, &mut rng).unwrap();
        let frame = Tensor::zeros([1, 3, 16, 16]);
        assert!(detect(&frame, &model, &cfg, 0).is_err());
    }
}
