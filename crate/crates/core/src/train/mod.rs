//! Training loops: Adam over graph parameters, the detector objective
//! (objectness BCE + box-distance L1 at positive cells) and the clip-level
//! TSN objective (BCE on the consensus probability).
//!
//! Everything is seeded and uses fixed reduction orders, so a run is
//! bit-reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClipLabel, DetectionScene, VideoClip};
use crate::detector::{detect, DetectorConfig, DetectorVariant, BOX_LAYER, SCORE_LAYER};
use crate::error::{Error, Result};
use crate::graph::exec::{self, Gradients, Mode};
use crate::graph::ModelGraph;
use crate::pipeline::{crop_rois, PipelineConfig};
use crate::tensor::Tensor;
use crate::tsn::{self, sample_segments, SampleMode, TsnConfig, FEATURE_LAYER, HEAD_LAYER};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

/// Adam with optional cosine decay of the step size.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<Tensor>>,
    v: Vec<Vec<Tensor>>,
}

impl Adam {
    pub fn new(graph: &ModelGraph, lr: f64) -> Self {
        let zeros = |g: &ModelGraph| -> Vec<Vec<Tensor>> {
            g.layers()
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.values.shape())).collect())
                .collect()
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(graph), v: zeros(graph) }
    }

    pub fn step(&mut self, graph: &mut ModelGraph, grads: &Gradients, lr_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for (li, layer) in graph.layers_mut().iter_mut().enumerate() {
            for (pi, p) in layer.params.iter_mut().enumerate() {
                if !p.learnable {
                    continue;
                }
                let g = &grads.params[li][pi];
                let m = &mut self.m[li][pi];
                let v = &mut self.v[li][pi];
                for i in 0..p.values.numel() {
                    let gi = g.data()[i];
                    let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    p.values.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

fn cosine_scale(epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / (total - 1).max(1) as f64).cos()).max(0.05)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-batch detector loss and head gradients.
///
/// Targets: the cell containing a box center is positive; objectness is
/// binary cross-entropy over all cells (positives upweighted), box distances
/// are an L1 on softplus-decoded left/top/right/bottom at positive cells.
fn detector_loss_and_grads(
    score_logits: &Tensor,
    box_raw: &Tensor,
    scenes: &[&DetectionScene],
    input_size: usize,
) -> (f64, Tensor, Tensor) {
    let [n, _, hs, ws] = score_logits.shape();
    let stride = input_size as f64 / hs as f64;
    let cells = (n * hs * ws) as f64;
    let pos_weight = 24.0;
    let box_weight = 0.4;

    let mut gs = Tensor::zeros(score_logits.shape());
    let mut gb = Tensor::zeros(box_raw.shape());
    let mut loss = 0.0;
    let mut npos = 0usize;

    // objectness targets per batch element
    let mut target = vec![0u8; n * hs * ws];
    let mut boxes_at = vec![None; n * hs * ws];
    for (bi, scene) in scenes.iter().enumerate() {
        let sx = input_size as f64 / scene.image.width as f64;
        let sy = input_size as f64 / scene.image.height as f64;
        for b in &scene.boxes {
            let cx = (b.x1 + b.x2) / 2.0 * sx;
            let cy = (b.y1 + b.y2) / 2.0 * sy;
            let gx = ((cx / stride) as usize).min(ws - 1);
            let gy = ((cy / stride) as usize).min(hs - 1);
            let idx = (bi * hs + gy) * ws + gx;
            target[idx] = 1;
            // scaled box in model coordinates
            boxes_at[idx] = Some((b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy));
            npos += 1;
        }
    }

    for bi in 0..n {
        for gy in 0..hs {
            for gx in 0..ws {
                let idx = (bi * hs + gy) * ws + gx;
                let z = score_logits.at(bi, 0, gy, gx);
                let t = f64::from(target[idx]);
                let w = if target[idx] == 1 { pos_weight } else { 1.0 };
                // stable bce-with-logits
                loss += w * (z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()) / cells;
                *gs.at_mut(bi, 0, gy, gx) = w * (sigmoid(z) - t) / cells;

                if let Some((x1, y1, x2, y2)) = boxes_at[idx] {
                    let ccx = (gx as f64 + 0.5) * stride;
                    let ccy = (gy as f64 + 0.5) * stride;
                    let targets = [
                        (ccx - x1) / stride,
                        (ccy - y1) / stride,
                        (x2 - ccx) / stride,
                        (y2 - ccy) / stride,
                    ];
                    for (c, &tgt) in targets.iter().enumerate() {
                        let raw = box_raw.at(bi, c, gy, gx);
                        let pred = softplus(raw);
                        let diff = pred - tgt.max(1e-3);
                        loss += box_weight * diff.abs() / npos.max(1) as f64;
                        *gb.at_mut(bi, c, gy, gx) =
                            box_weight * diff.signum() * sigmoid(raw) / npos.max(1) as f64;
                    }
                }
            }
        }
    }
    (loss, gs, gb)
}

pub struct TrainedDetector {
    pub graph: ModelGraph,
    pub epoch_losses: Vec<f64>,
}

/// One optimizer pass over a scene batch; returns the batch loss.
pub(crate) fn detector_step(
    graph: &mut ModelGraph,
    opt: &mut Adam,
    batch: &[&DetectionScene],
    input_size: usize,
    lr_scale: f64,
) -> Result<f64> {
    let bsz = batch.len();
    let mut input = Tensor::zeros([bsz, 3, input_size, input_size]);
    for (bi, scene) in batch.iter().enumerate() {
        let t = scene.image.to_tensor().resize_bilinear(input_size, input_size);
        let plane = 3 * input_size * input_size;
        input.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(t.data());
    }
    let acts = exec::forward(graph, &input, Mode::Train)?;
    let scores = acts.by_name(graph, SCORE_LAYER)?.clone();
    let boxes = acts.by_name(graph, BOX_LAYER)?.clone();
    let (loss, gs, gb) = detector_loss_and_grads(&scores, &boxes, batch, input_size);
    let seeds = vec![
        (graph.index_of(SCORE_LAYER).unwrap(), gs),
        (graph.index_of(BOX_LAYER).unwrap(), gb),
    ];
    let grads = exec::backward(graph, &acts, seeds)?;
    exec::commit_running_stats(graph, &acts);
    opt.step(graph, &grads, lr_scale);
    Ok(loss)
}

/// Train from scratch on labelled scenes.
pub fn train_detector(
    scenes: &[DetectionScene],
    det_cfg: &DetectorConfig,
    variant: DetectorVariant,
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    if scenes.is_empty() {
        return Err(Error::Input("cannot train a detector on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = crate::detector::build_detector(det_cfg, variant, &mut rng)?;
    train_detector_from(graph, scenes, det_cfg, cfg)
}

/// Continue training an existing graph (used by pruning fine-tune).
pub fn train_detector_from(
    mut graph: ModelGraph,
    scenes: &[DetectionScene],
    det_cfg: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    if scenes.is_empty() {
        return Err(Error::Input("cannot train a detector on an empty dataset".into()));
    }
    let mut opt = Adam::new(&graph, cfg.lr);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEECE66D);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let scale = cosine_scale(epoch, cfg.epochs);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&DetectionScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let loss = detector_step(&mut graph, &mut opt, &batch, det_cfg.input_size, scale)?;
            if !loss.is_finite() {
                return Ok(TrainedDetector { graph, epoch_losses });
            }
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        // divergence guard: several times the starting loss means the run
        // went off the rails; keep what we have
        if let Some(first) = epoch_losses.first() {
            if epoch_loss > 4.0 * first.max(1e-9) {
                epoch_losses.push(epoch_loss);
                return Ok(TrainedDetector { graph, epoch_losses });
            }
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainedDetector { graph, epoch_losses })
}

/// Evaluate a trained detector on held-out scenes.
pub fn eval_detector(
    graph: &ModelGraph,
    scenes: &[DetectionScene],
    det_cfg: &DetectorConfig,
) -> Result<crate::detector::DetectionMetrics> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        preds.push(detect(&scene.image.to_tensor(), graph, det_cfg, i)?);
        gts.push(crate::detector::Detections { frame_index: i, boxes: scene.boxes.clone() });
    }
    crate::detector::eval_detection(&preds, &gts)
}

/// How TSN training obtains its input stream.
pub enum SnippetSource<'a> {
    /// Run the detector on sampled frames and crop (the integrated pipeline).
    DetectorCrops { detector: &'a ModelGraph, det_cfg: &'a DetectorConfig, pipe: &'a PipelineConfig },
    /// Resize the whole frame (the TSN-only ablation).
    FullFrame,
}

pub struct TrainedTsn {
    pub graph: ModelGraph,
    pub epoch_losses: Vec<f64>,
}

fn clip_crops(
    clip: &VideoClip,
    indices: &[usize],
    source: &SnippetSource<'_>,
    crop_size: usize,
) -> Result<Tensor> {
    let mut batch = Tensor::zeros([indices.len(), 3, crop_size, crop_size]);
    let plane = 3 * crop_size * crop_size;
    for (row, &t) in indices.iter().enumerate() {
        let frame = clip.frames[t].to_tensor();
        let crop = match source {
            SnippetSource::FullFrame => frame.resize_bilinear(crop_size, crop_size),
            SnippetSource::DetectorCrops { detector, det_cfg, pipe } => {
                let dets = detect(&frame, detector, det_cfg, t)?;
                match crop_rois(&frame, &dets, pipe)? {
                    Some(roi) => roi.crop,
                    None => continue, // skip policy: leave the row zeroed
                }
            }
        };
        batch.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(crop.data());
    }
    Ok(batch)
}

/// Train the snippet encoder + head with BCE on the clip-level probability.
pub fn train_tsn(
    clips: &[VideoClip],
    tsn_cfg: &TsnConfig,
    source: SnippetSource<'_>,
    cfg: &TrainConfig,
) -> Result<TrainedTsn> {
    if clips.is_empty() {
        return Err(Error::Input("cannot train tsn on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graph = tsn::build_encoder(tsn_cfg, &mut rng)?;
    let mut opt = Adam::new(&graph, cfg.lr);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let feature_idx = graph.index_of(FEATURE_LAYER).unwrap();
    let head_idx = graph.index_of(HEAD_LAYER).unwrap();

    let k = tsn_cfg.k;
    let plane = 3 * tsn_cfg.input_size * tsn_cfg.input_size;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let scale = cosine_scale(epoch, cfg.epochs);
        let mut total = 0.0;
        let mut seen = 0usize;
        // mixed-class mini-batches keep the batch statistics honest
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut labels = Vec::with_capacity(chunk.len());
            let mut batch =
                Tensor::zeros([chunk.len() * k, 3, tsn_cfg.input_size, tsn_cfg.input_size]);
            for (row, &ci) in chunk.iter().enumerate() {
                let clip = &clips[ci];
                let label = match clip.label {
                    ClipLabel::Violent => 1.0,
                    ClipLabel::NonViolent => 0.0,
                    ClipLabel::Unknown => {
                        return Err(Error::Input("unlabelled clip in training set".into()))
                    }
                };
                labels.push(label);
                let seed = cfg.seed ^ ((epoch as u64) << 32) ^ ci as u64;
                let segs = sample_segments(clip.len(), k, SampleMode::Train, seed)?;
                let crops = clip_crops(clip, &segs.indices, &source, tsn_cfg.input_size)?;
                batch.data_mut()[row * k * plane..(row + 1) * k * plane]
                    .copy_from_slice(crops.data());
            }

            let acts = exec::forward(&graph, &batch, Mode::Train)?;
            let feats = acts.by_name(&graph, FEATURE_LAYER)?;
            let [_, d, _, _] = feats.shape();
            let head = &graph.layers()[head_idx];
            let w = head.param("weight").unwrap().values.data().to_vec();
            let b = head.param("bias").map_or(0.0, |p| p.values.data()[0]);

            let mut feat_grad = Tensor::zeros([chunk.len() * k, d, 1, 1]);
            let mut head_w_grad = vec![0.0; d];
            let mut head_b_grad = 0.0;
            let mut batch_loss = 0.0;
            for (ci_row, &label) in labels.iter().enumerate() {
                // per-clip consensus over this clip's K rows
                let mut g = vec![0.0; d];
                for row in ci_row * k..(ci_row + 1) * k {
                    for j in 0..d {
                        g[j] += feats.data()[row * d + j] / k as f64;
                    }
                }
                let z: f64 = w.iter().zip(g.iter()).map(|(wi, gi)| wi * gi).sum::<f64>() + b;
                let p = sigmoid(z);
                batch_loss +=
                    -(label * p.max(1e-12).ln() + (1.0 - label) * (1.0 - p).max(1e-12).ln());
                let dz = (p - label) / labels.len() as f64;
                for row in ci_row * k..(ci_row + 1) * k {
                    for j in 0..d {
                        *feat_grad.at_mut(row, j, 0, 0) = dz * w[j] / k as f64;
                    }
                }
                for j in 0..d {
                    head_w_grad[j] += dz * g[j];
                }
                head_b_grad += dz;
            }
            if !batch_loss.is_finite() {
                return Ok(TrainedTsn { graph, epoch_losses });
            }
            total += batch_loss;
            seen += labels.len();

            let mut grads = exec::backward(&graph, &acts, vec![(feature_idx, feat_grad)])?;
            for j in 0..d {
                grads.params[head_idx][0].data_mut()[j] += head_w_grad[j];
            }
            grads.params[head_idx][1].data_mut()[0] += head_b_grad;

            exec::commit_running_stats(&mut graph, &acts);
            opt.step(&mut graph, &grads, scale);
        }
        epoch_losses.push(total / seen.max(1) as f64);
    }
    Ok(TrainedTsn { graph, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_detection_scenes, SyntheticSceneConfig};

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let cfg = SyntheticSceneConfig { seed: 1, ..Default::default() };
        let scenes = gen_detection_scenes(6, &cfg).unwrap();
        let det_cfg = DetectorConfig { input_size: 64, ..Default::default() };
        let t = train_detector(
            &scenes,
            &det_cfg,
            DetectorVariant::GHOST,
            &TrainConfig { epochs: 0, ..Default::default() },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = crate::detector::build_detector(&det_cfg, DetectorVariant::GHOST, &mut rng).unwrap();
        for (a, b) in t.graph.layers().iter().zip(fresh.layers().iter()) {
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(pa.values.data(), pb.values.data());
            }
        }
        assert!(t.epoch_losses.is_empty());
    }

    #[test]
    fn lr_zero_keeps_weights_fixed() {
        let cfg = SyntheticSceneConfig { seed: 2, ..Default::default() };
        let scenes = gen_detection_scenes(4, &cfg).unwrap();
        let det_cfg = DetectorConfig { input_size: 64, ..Default::default() };
        let train_cfg = TrainConfig { epochs: 1, lr: 0.0, batch_size: 4, seed: 3 };
        let t = train_detector(&scenes, &det_cfg, DetectorVariant::GHOST, &train_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fresh = crate::detector::build_detector(&det_cfg, DetectorVariant::GHOST, &mut rng).unwrap();
        for (a, b) in t.graph.layers().iter().zip(fresh.layers().iter()) {
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                if pa.learnable {
                    assert_eq!(pa.values.data(), pb.values.data(), "layer {}", a.name);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_losses() {
        let cfg = SyntheticSceneConfig { seed: 4, ..Default::default() };
        let scenes = gen_detection_scenes(6, &cfg).unwrap();
        let det_cfg = DetectorConfig { input_size: 64, ..Default::default() };
        let train_cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 7, ..Default::default() };
        let a = train_detector(&scenes, &det_cfg, DetectorVariant::GHOST, &train_cfg).unwrap();
        let b = train_detector(&scenes, &det_cfg, DetectorVariant::GHOST, &train_cfg).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }
}
