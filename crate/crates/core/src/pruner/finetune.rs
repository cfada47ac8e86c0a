//! Post-pruning recovery training.


use crate::data::DetectionScene;
use crate::detector::DetectorConfig;
use crate::error::Result;
use crate::graph::ModelGraph;
use crate::train::{train_detector_from, TrainConfig, TrainedDetector};


/// Fine-tune a pruned detector with the original objective and a
/// cosine-decayed step size. Zero epochs (or a zero step size) returns the
/// weights unchanged; training stops early if the loss diverges.
pub fn finetune(
    graph: ModelGraph,
    scenes: &[DetectionScene],
    det_cfg: &DetectorConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainedDetector> {
    if epochs == 0 {
        return Ok(TrainedDetector { graph, epoch_losses: vec![] });
    }
    let cfg = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
    train_detector_from(graph, scenes, det_cfg, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_detection_scenes, SyntheticSceneConfig};
    use crate::detector::{build_detector, DetectorVariant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det_cfg = DetectorConfig { input_size: 64, ..Default::default() };
        let g = build_detector(&det_cfg, DetectorVariant::GHOST, &mut rng).unwrap();
        let scenes =
            gen_detection_scenes(5, &SyntheticSceneConfig::default()).unwrap();
        let before: Vec<f64> = g.layers().iter().flat_map(|l| l.params.iter())
            .flat_map(|p| p.values.data().to_vec()).collect();
        let out = finetune(g, &scenes, &det_cfg, 0, 1e-3, 1).unwrap();
        let after: Vec<f64> = out.graph.layers().iter().flat_map(|l| l.params.iter())
            .flat_map(|p| p.values.data().to_vec()).collect();
        assert_eq!(before, after);
        assert!(out.epoch_losses.is_empty());
    }
}
