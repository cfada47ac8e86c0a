//! Harness configuration file: JSON with `detector`, `tsn`, `pruning`,
//! `pipeline` and `data` sections. Every field has a default so partial
//! configs work.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticSceneConfig;
use crate::detector::DetectorConfig;
use crate::error::Result;
use crate::pipeline::PipelineConfig;
use crate::train::TrainConfig;
use crate::tsn::TsnConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    #[serde(flatten)]
    pub config: DetectorConfig,
    pub variant: String,
    pub train: TrainConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            config: DetectorConfig::default(),
            variant: "ghost+ema".to_string(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsnSection {
    #[serde(flatten)]
    pub config: TsnConfig,
    pub train: TrainConfig,
    /// Train/evaluate on whole frames instead of detector crops.
    pub full_frame: bool,
}

impl Default for TsnSection {
    fn default() -> Self {
        Self { config: TsnConfig::default(), train: TrainConfig::default(), full_frame: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruningSection {
    pub ratio: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for PruningSection {
    fn default() -> Self {
        Self { ratio: 0.4, finetune_epochs: 5, finetune_lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub scene: SyntheticSceneConfig,
    /// Number of detection scenes `gen-data --kind detection` produces.
    pub detection_count: usize,
    /// Number of clips `gen-data --kind video` produces.
    pub video_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { scene: SyntheticSceneConfig::default(), detection_count: 200, video_count: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub detector: DetectorSection,
    pub tsn: TsnSection,
    pub pruning: PruningSection,
    pub pipeline: PipelineConfig,
    pub data: DataSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Small-model settings sized for CPU-only experiments: 96 px scenes,
    /// 96 px detector input, 64 px crops.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.detector.config.input_size = 96;
        c.detector.train = TrainConfig { epochs: 24, batch_size: 8, lr: 3e-3, seed: 0 };
        c.tsn.config.input_size = 64;
        c.tsn.train = TrainConfig { epochs: 14, batch_size: 4, lr: 2e-3, seed: 0 };
        c.pipeline.crop_size = 64;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let json = r#"{"pruning": {"ratio": 0.25}}"#;
        let c: Config = serde_json::from_str(json).unwrap();
        assert_eq!(c.pruning.ratio, 0.25);
        assert_eq!(c.pruning.finetune_epochs, 5);
        assert_eq!(c.detector.variant, "ghost+ema");
        assert_eq!(c.pipeline.crop_size, 224);
    }

    #[test]
    fn desk_profile_is_internally_consistent() {
        let c = Config::desk();
        assert_eq!(c.pipeline.crop_size, c.tsn.config.input_size);
        assert_eq!(c.detector.config.input_size % 32, 0);
    }
}
