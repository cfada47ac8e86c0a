//! Detect -> crop -> temporally classify.
//!
//! For each sampled frame the detector proposes person boxes; the multi
//! person policy collapses them into one region (the padded union hull by
//! default, preserving the interaction context), which is cropped row-major
//! and resized for the snippet encoder. Detection runs only on the sampled
//! frames unless `detect_all_frames` asks for the full-rate variant.

use serde::{Deserialize, Serialize};

use crate::detector::{detect, BoundingBox, Detections, DetectorConfig};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::tsn::{
    classify, consensus, encode_batch, sample_segments, ClassifierHead, SampleMode, SegmentIndices,
    TsnConfig,
};
use crate::data::VideoClip;
use crate::graph::exec::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiPersonPolicy {
    /// Axis-aligned hull of every detection.
    Union,
    /// Largest-area detection only.
    Largest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoDetectionPolicy {
    /// Fall back to the whole frame.
    FullFrame,
    /// Drop the frame from the consensus.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Fractional padding added around the selected region.
    pub pad_ratio: f64,
    /// Square side the crop is resized to.
    pub crop_size: usize,
    pub multi_person_policy: MultiPersonPolicy,
    pub no_detection_policy: NoDetectionPolicy,
    /// Violence decision threshold on the final probability.
    pub decision_threshold: f64,
    /// Run the detector on every frame instead of only the sampled ones.
    pub detect_all_frames: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pad_ratio: 0.1,
            crop_size: 224,
            multi_person_policy: MultiPersonPolicy::Union,
            no_detection_policy: NoDetectionPolicy::FullFrame,
            decision_threshold: 0.5,
            detect_all_frames: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(Error::Config("decision threshold must be in [0,1]".into()));
        }
        if self.crop_size < 32 {
            return Err(Error::Config("crop size must be >= 32".into()));
        }
        if self.pad_ratio < 0.0 {
            return Err(Error::Config("pad ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Where a frame's crop came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoiSource {
    Box(BoundingBox),
    FullFrame,
}

/// One cropped, resized region of interest.
#[derive(Debug, Clone)]
pub struct RoiFrame {
    pub t: usize,
    pub crop: Tensor,
    pub source: RoiSource,
}

fn union_hull(boxes: &[BoundingBox]) -> BoundingBox {
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    let mut score: f64 = 0.0;
    for b in boxes {
        x1 = x1.min(b.x1);
        y1 = y1.min(b.y1);
        x2 = x2.max(b.x2);
        y2 = y2.max(b.y2);
        score = score.max(b.score);
    }
    BoundingBox { x1, y1, x2, y2, score }
}

fn largest(boxes: &[BoundingBox]) -> BoundingBox {
    *boxes
        .iter()
        .max_by(|a, b| {
            a.area()
                .partial_cmp(&b.area())
                .unwrap()
                .then(a.x1.partial_cmp(&b.x1).unwrap())
                .then(a.y1.partial_cmp(&b.y1).unwrap())
        })
        .unwrap()
}

/// Crop the region selected by the policy out of `frame` `(1,3,H,W)` and
/// resize it to `crop_size`. `Ok(None)` marks a skipped frame.
pub fn crop_rois(frame: &Tensor, dets: &Detections, cfg: &PipelineConfig) -> Result<Option<RoiFrame>> {
    cfg.validate()?;
    let [_, _, h, w] = frame.shape();
    let (fw, fh) = (w as f64, h as f64);
    let region = if dets.boxes.is_empty() {
        match cfg.no_detection_policy {
            NoDetectionPolicy::Skip => return Ok(None),
            NoDetectionPolicy::FullFrame => None,
        }
    } else {
        let raw = match cfg.multi_person_policy {
            MultiPersonPolicy::Union => union_hull(&dets.boxes),
            MultiPersonPolicy::Largest => largest(&dets.boxes),
        };
        let pad_x = cfg.pad_ratio * (raw.x2 - raw.x1) / 2.0;
        let pad_y = cfg.pad_ratio * (raw.y2 - raw.y1) / 2.0;
        let padded = BoundingBox {
            x1: raw.x1 - pad_x,
            y1: raw.y1 - pad_y,
            x2: raw.x2 + pad_x,
            y2: raw.y2 + pad_y,
            score: raw.score,
        };
        padded.clipped(fw, fh)
    };

    let (crop, source) = match region {
        Some(b) => {
            // row-major integer slice [y1..y2, x1..x2]
            let y0 = b.y1.floor().max(0.0) as usize;
            let y1 = (b.y2.ceil() as usize).min(h).max(y0 + 1);
            let x0 = b.x1.floor().max(0.0) as usize;
            let x1 = (b.x2.ceil() as usize).min(w).max(x0 + 1);
            let sliced = frame.crop(y0, y1.min(h), x0, x1.min(w))?;
            (sliced.resize_bilinear(cfg.crop_size, cfg.crop_size), RoiSource::Box(b))
        }
        None => (frame.resize_bilinear(cfg.crop_size, cfg.crop_size), RoiSource::FullFrame),
    };
    Ok(Some(RoiFrame { t: dets.frame_index, crop, source }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictLabel {
    Violent,
    NonViolent,
}

/// Clip-level decision with the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub probability: f64,
    pub label: VerdictLabel,
    pub per_segment_indices: SegmentIndices,
    /// Per sampled frame: the source box, or `None` for a full-frame crop.
    pub boxes_used: Vec<(usize, Option<BoundingBox>)>,
}

impl Verdict {
    /// The interchange form: `{probability, label, frames: [{t, box|null}]}`.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct FrameRec<'a> {
            t: usize,
            #[serde(rename = "box")]
            bbox: &'a Option<BoundingBox>,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            probability: f64,
            label: VerdictLabel,
            frames: Vec<FrameRec<'a>>,
        }
        let doc = Doc {
            probability: self.probability,
            label: self.label,
            frames: self.boxes_used.iter().map(|(t, b)| FrameRec { t: *t, bbox: b }).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

pub struct PipelineModels<'a> {
    pub detector: &'a ModelGraph,
    pub det_cfg: &'a DetectorConfig,
    pub tsn: &'a ModelGraph,
    pub tsn_cfg: &'a TsnConfig,
}

/// Run the full pipeline on one clip. Deterministic given the seed (the seed
/// only matters for train-mode sampling; inference uses segment centers).
pub fn run_pipeline(
    clip: &VideoClip,
    models: &PipelineModels<'_>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Verdict> {
    cfg.validate()?;
    if clip.is_empty() {
        return Err(Error::Input("clip has no frames".into()));
    }
    if cfg.crop_size != models.tsn_cfg.input_size {
        return Err(Error::Config(format!(
            "crop size {} does not match encoder input {}",
            cfg.crop_size, models.tsn_cfg.input_size
        )));
    }
    let segs = sample_segments(clip.len(), models.tsn_cfg.k, SampleMode::Test, seed)?;

    // full-rate detection when asked; otherwise only the sampled frames
    let mut dets_by_frame: std::collections::BTreeMap<usize, Detections> = Default::default();
    let wanted: Vec<usize> = if cfg.detect_all_frames {
        (0..clip.len()).collect()
    } else {
        let mut v = segs.indices.clone();
        v.dedup();
        v
    };
    for &t in &wanted {
        let frame = clip.frames[t].to_tensor();
        dets_by_frame.insert(t, detect(&frame, models.detector, models.det_cfg, t)?);
    }

    let mut crops: Vec<RoiFrame> = Vec::with_capacity(segs.indices.len());
    let mut boxes_used = Vec::with_capacity(segs.indices.len());
    for &t in &segs.indices {
        let frame = clip.frames[t].to_tensor();
        let dets = dets_by_frame.get(&t).unwrap();
        match crop_rois(&frame, dets, cfg)? {
            Some(roi) => {
                boxes_used.push((
                    t,
                    match &roi.source {
                        RoiSource::Box(b) => Some(*b),
                        RoiSource::FullFrame => None,
                    },
                ));
                crops.push(roi);
            }
            None => boxes_used.push((t, None)),
        }
    }
    if crops.is_empty() {
        return Err(Error::NoEvidence);
    }

    let mut batch = Tensor::zeros([crops.len(), 3, cfg.crop_size, cfg.crop_size]);
    let plane = 3 * cfg.crop_size * cfg.crop_size;
    for (i, roi) in crops.iter().enumerate() {
        batch.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(roi.crop.data());
    }
    let features = encode_batch(&batch, models.tsn, Mode::Eval)?;
    let g = consensus(&features)?;
    let head = ClassifierHead::from_graph(models.tsn)?;
    let probability = classify(&g, &head)?;
    let label = if probability >= cfg.decision_threshold {
        VerdictLabel::Violent
    } else {
        VerdictLabel::NonViolent
    };
    Ok(Verdict { probability, label, per_segment_indices: segs, boxes_used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrameBuf;
    use crate::detector::{build_detector, DetectorVariant};
    use crate::tsn::build_encoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, 0.9).unwrap()
    }

    fn det(boxes: Vec<BoundingBox>) -> Detections {
        Detections { frame_index: 0, boxes }
    }

    #[test]
    fn single_box_crop_matches_region() {
        let mut frame = Tensor::zeros([1, 3, 100, 100]);
        for y in 10..90 {
            for x in 10..50 {
                *frame.at_mut(0, 0, y, x) = 1.0;
            }
        }
        let cfg = PipelineConfig { pad_ratio: 0.0, crop_size: 40, ..Default::default() };
        let roi = crop_rois(&frame, &det(vec![bx(10.0, 10.0, 50.0, 90.0)]), &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(roi.crop.shape(), [1, 3, 40, 40]);
        // crop should be entirely the painted region
        let mean: f64 = roi.crop.data().iter().sum::<f64>() / roi.crop.numel() as f64;
        assert!(mean > 0.33 - 1e-6, "mean {mean}"); // channel 0 fully painted
        match roi.source {
            RoiSource::Box(b) => assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 10.0, 50.0, 90.0)),
            _ => panic!("expected box source"),
        }
    }

    #[test]
    fn union_hull_and_order_independence() {
        let frame = Tensor::zeros([1, 3, 64, 64]);
        let cfg = PipelineConfig { pad_ratio: 0.0, crop_size: 32, ..Default::default() };
        let a = bx(10.0, 10.0, 20.0, 20.0);
        let b = bx(30.0, 30.0, 40.0, 40.0);
        let r1 = crop_rois(&frame, &det(vec![a, b]), &cfg).unwrap().unwrap();
        let r2 = crop_rois(&frame, &det(vec![b, a]), &cfg).unwrap().unwrap();
        match (&r1.source, &r2.source) {
            (RoiSource::Box(h1), RoiSource::Box(h2)) => {
                assert_eq!((h1.x1, h1.y1, h1.x2, h1.y2), (10.0, 10.0, 40.0, 40.0));
                assert_eq!(h1, h2);
            }
            _ => panic!("expected hull boxes"),
        }
        assert_eq!(r1.crop, r2.crop);
    }

    #[test]
    fn zero_detections_policies() {
        let frame = Tensor::filled([1, 3, 64, 64], 0.25);
        let full = PipelineConfig { crop_size: 32, ..Default::default() };
        let roi = crop_rois(&frame, &det(vec![]), &full).unwrap().unwrap();
        assert!(matches!(roi.source, RoiSource::FullFrame));
        assert!(roi.crop.data().iter().all(|v| (v - 0.25).abs() < 1e-9));

        let skip = PipelineConfig {
            no_detection_policy: NoDetectionPolicy::Skip,
            crop_size: 32,
            ..Default::default()
        };
        assert!(crop_rois(&frame, &det(vec![]), &skip).unwrap().is_none());
    }

    #[test]
    fn largest_policy_picks_biggest() {
        let frame = Tensor::zeros([1, 3, 64, 64]);
        let cfg = PipelineConfig {
            multi_person_policy: MultiPersonPolicy::Largest,
            pad_ratio: 0.0,
            crop_size: 32,
            ..Default::default()
        };
        let small = bx(1.0, 1.0, 5.0, 5.0);
        let big = bx(10.0, 10.0, 40.0, 50.0);
        let roi = crop_rois(&frame, &det(vec![small, big]), &cfg).unwrap().unwrap();
        match roi.source {
            RoiSource::Box(b) => assert_eq!((b.x1, b.x2), (10.0, 40.0)),
            _ => panic!(),
        }
    }

    #[test]
    fn pipeline_runs_deterministically_on_degenerate_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det_cfg = DetectorConfig { input_size: 64, confidence: 0.99, ..Default::default() };
        let detector = build_detector(&det_cfg, DetectorVariant::GHOST, &mut rng).unwrap();
        let tsn_cfg = TsnConfig { input_size: 32, feature_dim: 8, ..Default::default() };
        let tsn = build_encoder(&tsn_cfg, &mut rng).unwrap();
        let clip = VideoClip {
            frames: vec![FrameBuf::new(48, 48); 9],
            fps: 10.0,
            label: crate::data::ClipLabel::Unknown,
        };
        let cfg = PipelineConfig { crop_size: 32, ..Default::default() };
        let models = PipelineModels { detector: &detector, det_cfg: &det_cfg, tsn: &tsn, tsn_cfg: &tsn_cfg };
        let v1 = run_pipeline(&clip, &models, &cfg, 5).unwrap();
        let v2 = run_pipeline(&clip, &models, &cfg, 5).unwrap();
        assert_eq!(v1, v2);
        assert!(v1.probability > 0.0 && v1.probability < 1.0);
        // untrained detector over threshold 0.99 finds nothing -> full frames
        assert!(v1.boxes_used.iter().all(|(_, b)| b.is_none()));

        // skip policy with zero detections everywhere -> no evidence
        let skip = PipelineConfig {
            no_detection_policy: NoDetectionPolicy::Skip,
            crop_size: 32,
            ..Default::default()
        };
        assert!(matches!(run_pipeline(&clip, &models, &skip, 5), Err(Error::NoEvidence)));
    }
}
