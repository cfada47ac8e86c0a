//! Ablation runner and experiment reports.
//!
//! A report is a list of rows, one per model configuration, carrying either
//! detection metrics plus analytic costs (the backbone / attention / pruning
//! comparisons) or a clip-level accuracy. Every value is the mean over the
//! configured number of seeded runs, and the raw per-run values are kept so
//! external tools can run their own statistics. Re-running with the same
//! seed list reproduces the report byte for byte.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::synth::{gen_detection_scenes, gen_video_scenes};
use crate::data::{split_dataset, ClipLabel, VideoClip};
use crate::detector::DetectorVariant;
use crate::error::{Error, Result};
use crate::graph::cost::{cost_report, count_params};
use crate::pipeline::VerdictLabel;
use crate::pruner::{apply_plan, build_plan, finetune};
use crate::tensor::TensorSpec;
use crate::train::{eval_detector, train_detector, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunValues {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gflops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    pub per_run: Vec<RunValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let has_det = self.rows.iter().any(|r| r.map50.is_some());
        let has_acc = self.rows.iter().any(|r| r.acc.is_some());
        let mut out = String::new();
        let mut header = format!("{:<26}", "Model");
        if has_det {
            header.push_str(&format!("{:>9} {:>9} {:>12} {:>9}", "Recall", "mAP", "Params", "GFLOPs"));
        }
        if has_acc {
            header.push_str(&format!("{:>9}", "ACC"));
        }
        out.push_str(&header);
        out.push('\n');
        out.push_str(&"-".repeat(header.len()));
        out.push('\n');
        for r in &self.rows {
            let mut line = format!("{:<26}", r.model);
            if has_det {
                let fmt_f = |v: Option<f64>| v.map_or("     -".into(), |x| format!("{x:.3}"));
                line.push_str(&format!(
                    "{:>9} {:>9} {:>12} {:>9}",
                    fmt_f(r.recall),
                    fmt_f(r.map50),
                    r.params.map_or("-".into(), |p| p.to_string()),
                    r.gflops.map_or("-".into(), |g| format!("{g:.4}")),
                ));
            }
            if has_acc {
                line.push_str(&format!("{:>9}", r.acc.map_or("-".into(), |a| format!("{a:.3}"))));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// The three comparison axes. Rows are the cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub backbones: Vec<String>,
    pub attentions: Vec<String>,
    pub prune_ratios: Vec<f64>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            backbones: vec!["standard".into(), "ghost".into()],
            attentions: vec!["none".into(), "ema".into()],
            prune_ratios: vec![0.0],
        }
    }
}

fn variant_for(backbone: &str, attention: &str) -> Result<DetectorVariant> {
    let name = match attention {
        "none" | "" => backbone.to_string(),
        a => format!("{backbone}+{a}"),
    };
    name.parse()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Train/evaluate every (backbone, attention, ratio) cell `runs` times with
/// seeds `base_seed..base_seed+runs` and report averaged metrics plus
/// analytic costs. Ratio 0 rows skip pruning entirely, so they are identical
/// to their unpruned baseline.
pub fn run_ablation(axes: &AblationAxes, runs: usize, cfg: &Config) -> Result<ExperimentReport> {
    if runs == 0 {
        return Err(Error::Config("ablation needs at least one run".into()));
    }
    for a in &axes.attentions {
        if !matches!(a.as_str(), "none" | "" | "ema") {
            return Err(Error::Config(format!("unknown attention '{a}' (expected none|ema)")));
        }
    }
    for r in &axes.prune_ratios {
        if !(0.0..1.0).contains(r) {
            return Err(Error::Config(format!("prune ratio {r} outside [0,1)")));
        }
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|r| cfg.detector.train.seed + r).collect();
    let spec = TensorSpec::new(
        1,
        3,
        cfg.detector.config.input_size,
        cfg.detector.config.input_size,
    )?;

    let mut rows = Vec::new();
    for backbone in &axes.backbones {
        for attention in &axes.attentions {
            let variant = variant_for(backbone, attention)?;
            for &ratio in &axes.prune_ratios {
                let mut per_run = Vec::with_capacity(runs);
                let mut cost = None;
                for &seed in &seeds {
                    let scenes = gen_detection_scenes(
                        cfg.data.detection_count,
                        &crate::data::synth::SyntheticSceneConfig { seed, ..cfg.data.scene },
                    )?;
                    let (train_scenes, test_scenes) = split_dataset(&scenes, seed)?;
                    let train_cfg = TrainConfig { seed, ..cfg.detector.train };
                    let trained =
                        train_detector(&train_scenes, &cfg.detector.config, variant, &train_cfg)?;
                    let graph = if ratio > 0.0 {
                        let plan = build_plan(&trained.graph, ratio)?;
                        let pruned = apply_plan(&trained.graph, &plan)?;
                        finetune(
                            pruned,
                            &train_scenes,
                            &cfg.detector.config,
                            cfg.pruning.finetune_epochs,
                            cfg.pruning.finetune_lr,
                            seed,
                        )?
                        .graph
                    } else {
                        trained.graph
                    };
                    let metrics = eval_detector(&graph, &test_scenes, &cfg.detector.config)?;
                    if cost.is_none() {
                        cost = Some(cost_report(&graph, &spec)?);
                    }
                    per_run.push(RunValues {
                        seed,
                        recall: Some(metrics.recall),
                        map50: Some(metrics.map50),
                        acc: None,
                    });
                }
                let cost = cost.unwrap();
                let name = if ratio > 0.0 {
                    format!("{variant} pruned r={ratio}")
                } else {
                    variant.to_string()
                };
                rows.push(ReportRow {
                    model: name,
                    recall: Some(mean(&per_run.iter().map(|r| r.recall.unwrap()).collect::<Vec<_>>())),
                    map50: Some(mean(&per_run.iter().map(|r| r.map50.unwrap()).collect::<Vec<_>>())),
                    params: Some(cost.params),
                    gflops: Some(cost.gflops),
                    acc: None,
                    per_run,
                });
            }
        }
    }
    Ok(ExperimentReport { seeds, runs, rows })
}

/// Fraction of clips whose predicted label matches the ground truth.
pub fn eval_acc<F>(clips: &[VideoClip], mut predict: F) -> Result<f64>
where
    F: FnMut(&VideoClip) -> Result<VerdictLabel>,
{
    if clips.is_empty() {
        return Err(Error::Input("cannot evaluate accuracy on zero clips".into()));
    }
    let mut correct = 0usize;
    for clip in clips {
        let truth = match clip.label {
            ClipLabel::Violent => VerdictLabel::Violent,
            ClipLabel::NonViolent => VerdictLabel::NonViolent,
            ClipLabel::Unknown => {
                return Err(Error::Input("clip without a label in accuracy evaluation".into()))
            }
        };
        if predict(clip)? == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Convenience used by the CLI `gen-data` cache key and report footers.
pub fn count_params_of(graph: &crate::graph::ModelGraph) -> u64 {
    count_params(graph)
}

/// Generate a balanced clip set for video experiments.
pub fn video_dataset(cfg: &Config, seed: u64) -> Result<Vec<VideoClip>> {
    gen_video_scenes(
        cfg.data.video_count,
        &crate::data::synth::SyntheticSceneConfig { seed, ..cfg.data.scene },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_acc_hand_counts() {
        let cfg = crate::data::synth::SyntheticSceneConfig { frames: 4, ..Default::default() };
        let clips = crate::data::synth::gen_video_scenes(10, &cfg).unwrap();
        // oracle that is always right
        let acc = eval_acc(&clips, |c| {
            Ok(match c.label {
                ClipLabel::Violent => VerdictLabel::Violent,
                _ => VerdictLabel::NonViolent,
            })
        })
        .unwrap();
        assert_eq!(acc, 1.0);
        // majority-class stub on the balanced set
        let acc = eval_acc(&clips, |_| Ok(VerdictLabel::Violent)).unwrap();
        assert_eq!(acc, 0.5);
        // hand-built confusion: flip predictions on violent clips only
        let acc = eval_acc(&clips, |c| {
            Ok(match c.label {
                ClipLabel::Violent => VerdictLabel::NonViolent,
                _ => VerdictLabel::NonViolent,
            })
        })
        .unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn text_table_renders_all_columns() {
        let report = ExperimentReport {
            seeds: vec![0],
            runs: 1,
            rows: vec![ReportRow {
                model: "ghost+ema".into(),
                recall: Some(0.7),
                map50: Some(0.75),
                params: Some(12345),
                gflops: Some(0.0123),
                acc: None,
                per_run: vec![RunValues { seed: 0, recall: Some(0.7), map50: Some(0.75), acc: None }],
            }],
        };
        let text = report.to_text();
        assert!(text.contains("ghost+ema"));
        assert!(text.contains("12345"));
        assert!(text.contains("0.750"));
    }
}
