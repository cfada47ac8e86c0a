//! `visafe` — command-line harness for the violence-recognition pipeline.
//!
//! Subcommands: `gen-data`, `split`, `train-detector`, `train-tsn`, `prune`,
//! `ablate`, `pipeline`, `eval`. Without `--config` the desk profile is used
//! (96 px scenes and detector input, 64 px crops), which trains in minutes on
//! one CPU core. `VISAFE_CACHE` points generated datasets at a shared cache
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use visafe_core::config::Config;
use visafe_core::data::synth::{gen_detection_scenes, gen_video_scenes, SyntheticSceneConfig};
use visafe_core::data::{
    load_clip, load_clip_dataset, load_detection_scenes, save_clips, save_detection_scenes,
    split_dataset, ClipLabel, DatasetManifest, ManifestItem, Split,
};
use visafe_core::detector::DetectorVariant;
use visafe_core::graph::cost::cost_report;
use visafe_core::graph::exec::Mode;
use visafe_core::graph::io::{graph_to_json, load_checkpoint, load_graph_file, save_checkpoint};
use visafe_core::pipeline::{run_pipeline, PipelineModels, VerdictLabel};
use visafe_core::pruner::{apply_plan, build_plan};
use visafe_core::report::{eval_acc, run_ablation, AblationAxes};
use visafe_core::tensor::TensorSpec;
use visafe_core::train::{eval_detector, train_detector, train_tsn, SnippetSource};
use visafe_core::tsn::{classify, consensus, encode_batch, sample_segments, ClassifierHead, SampleMode};
use visafe_core::Tensor;

#[derive(Parser)]
#[command(name = "visafe", version, about = "Desk-scale violence recognition pipeline")]
struct Cli {
    /// Master seed; overrides the seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config with {detector, tsn, pruning, pipeline, data} sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (honors VISAFE_CACHE).
    GenData(GenDataArgs),
    /// Split a dataset directory into train/test manifests (8:2).
    Split(SplitArgs),
    /// Train the person detector on a YOLO-layout directory.
    TrainDetector(TrainDetectorArgs),
    /// Train the temporal classifier on a directory-per-class clip dataset.
    TrainTsn(TrainTsnArgs),
    /// Score channels, build a plan and emit the pruned graph plus costs.
    Prune(PruneArgs),
    /// Run the backbone/attention/pruning comparison table.
    Ablate(AblateArgs),
    /// Classify one clip with the full detect->crop->classify pipeline.
    Pipeline(PipelineArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// detection | video
    #[arg(long)]
    kind: String,
    #[arg(long)]
    count: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory (YOLO images or class-folder clips).
    #[arg(long)]
    data: PathBuf,
    /// detection | video
    #[arg(long)]
    kind: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[arg(long)]
    data: PathBuf,
    /// Registry name: standard | ghost | ghost+ema
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTsnArgs {
    #[arg(long)]
    data: PathBuf,
    /// Detector checkpoint used to crop training snippets.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Train on whole frames instead of detector crops.
    #[arg(long)]
    full_frame: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    /// Graph JSON (with parameters) or a checkpoint.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    ratio: f64,
    /// Pruned graph JSON.
    #[arg(long)]
    out: PathBuf,
    /// Before/after cost report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated backbones (default: standard,ghost).
    #[arg(long)]
    backbones: Option<String>,
    /// Comma-separated attentions (default: none,ema).
    #[arg(long)]
    attentions: Option<String>,
    /// Comma-separated pruning ratios (default: 0.0).
    #[arg(long)]
    ratios: Option<String>,
    /// Seeded repetitions averaged per row.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Clip directory (zero-padded PNG frames).
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    tsn: PathBuf,
    /// Verdict JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Run detection on every frame, not only the sampled ones.
    #[arg(long)]
    detect_all_frames: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// detection | video
    #[arg(long)]
    task: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Detector checkpoint (video task).
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.detector.train.seed = seed;
        cfg.tsn.train.seed = seed;
        cfg.data.scene.seed = seed;
    }
    Ok(cfg)
}

fn cache_dir_for(kind: &str, count: usize, cfg: &SyntheticSceneConfig) -> Option<PathBuf> {
    let root = std::env::var_os("VISAFE_CACHE")?;
    let key = format!(
        "{kind}-n{count}-c{}-a{}-f{}-noise{}-seed{}",
        cfg.canvas, cfg.actor_count, cfg.frames, cfg.noise, cfg.seed
    );
    Some(PathBuf::from(root).join(key))
}

fn write_manifest(
    out: &Path,
    name: &str,
    root: &Path,
    seed: u64,
    items: Vec<ManifestItem>,
    split: Split,
) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let manifest = DatasetManifest { root: root.to_path_buf(), split, seed, items };
    let path = out.join(name);
    manifest.save(&path)?;
    Ok(path)
}

fn detection_items(dir: &Path) -> Result<Vec<ManifestItem>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    Ok(v.into_iter()
        .map(|p| {
            let ann = p.with_extension("txt");
            ManifestItem { path: p, label: None, annotation: Some(ann) }
        })
        .collect())
}

fn clip_items(dir: &Path) -> Result<Vec<ManifestItem>> {
    let mut v = Vec::new();
    for class in ["violent", "non_violent"] {
        let sub = dir.join(class);
        if sub.exists() {
            let mut dirs: Vec<PathBuf> = fs::read_dir(&sub)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            v.extend(dirs.into_iter().map(|p| ManifestItem {
                path: p,
                label: Some(class.to_string()),
                annotation: None,
            }));
        }
    }
    Ok(v)
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let scene = cfg.data.scene;
    let (kind, count) = match args.kind.as_str() {
        "detection" => ("detection", args.count.unwrap_or(cfg.data.detection_count)),
        "video" => ("video", args.count.unwrap_or(cfg.data.video_count)),
        other => bail!("unknown kind '{other}' (expected detection|video)"),
    };
    let target = match cache_dir_for(kind, count, &scene) {
        Some(dir) => dir,
        None => args.out.join(kind),
    };
    let marker = target.join(".complete");
    if marker.exists() {
        println!("cache hit: {}", target.display());
    } else {
        fs::create_dir_all(&target)?;
        match kind {
            "detection" => {
                let scenes =
                    gen_detection_scenes(count, &scene).context("generating detection scenes")?;
                save_detection_scenes(&target, &scenes)?;
            }
            _ => {
                let clips = gen_video_scenes(count, &scene).context("generating clips")?;
                save_clips(&target, &clips)?;
            }
        }
        fs::write(&marker, "ok")?;
        println!("generated {count} {kind} samples in {}", target.display());
    }
    let items = match kind {
        "detection" => detection_items(&target)?,
        _ => clip_items(&target)?,
    };
    let path = write_manifest(
        &args.out,
        &format!("{kind}_items.json"),
        &target,
        scene.seed,
        items,
        Split::Train,
    )?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn cmd_split(cli: &Cli, args: &SplitArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.data.scene.seed);
    let items = match args.kind.as_str() {
        "detection" => detection_items(&args.data)?,
        "video" => clip_items(&args.data)?,
        other => bail!("unknown kind '{other}'"),
    };
    let (train, test) = split_dataset(&items, seed)?;
    let p1 = write_manifest(&args.out, "train.json", &args.data, seed, train, Split::Train)?;
    let p2 = write_manifest(&args.out, "test.json", &args.data, seed, test, Split::Test)?;
    println!("wrote {} and {}", p1.display(), p2.display());
    Ok(())
}

fn cmd_train_detector(cli: &Cli, args: &TrainDetectorArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let variant: DetectorVariant =
        args.variant.as_deref().unwrap_or(&cfg.detector.variant).parse()?;
    let scenes = load_detection_scenes(&args.data)
        .with_context(|| format!("loading scenes from {}", args.data.display()))?;
    let (train, test) = split_dataset(&scenes, cfg.detector.train.seed)?;
    println!("training {variant} on {} scenes ({} held out)", train.len(), test.len());
    let trained = train_detector(&train, &cfg.detector.config, variant, &cfg.detector.train)?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {e:>3}  loss {l:.5}");
    }
    let metrics = eval_detector(&trained.graph, &test, &cfg.detector.config)?;
    println!("held-out recall {:.3}  mAP@0.5 {:.3}", metrics.recall, metrics.map50);
    fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("detector.ckpt");
    save_checkpoint(&trained.graph, &ckpt)?;
    let spec =
        TensorSpec::new(1, 3, cfg.detector.config.input_size, cfg.detector.config.input_size)?;
    let cost = cost_report(&trained.graph, &spec)?;
    fs::write(args.out.join("detector_cost.json"), serde_json::to_string_pretty(&cost)?)?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn full_frame_acc(
    clips: &[visafe_core::data::VideoClip],
    tsn: &visafe_core::graph::ModelGraph,
    tsn_cfg: &visafe_core::tsn::TsnConfig,
    seed: u64,
) -> Result<f64> {
    let head = ClassifierHead::from_graph(tsn)?;
    let s = tsn_cfg.input_size;
    let acc = eval_acc(clips, |clip| {
        let segs = sample_segments(clip.len(), tsn_cfg.k, SampleMode::Test, seed)?;
        let mut batch = Tensor::zeros([segs.indices.len(), 3, s, s]);
        let plane = 3 * s * s;
        for (i, &t) in segs.indices.iter().enumerate() {
            let f = clip.frames[t].to_tensor().resize_bilinear(s, s);
            batch.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(f.data());
        }
        let feats = encode_batch(&batch, tsn, Mode::Eval)?;
        let g = consensus(&feats)?;
        let p = classify(&g, &head)?;
        Ok(if p >= 0.5 { VerdictLabel::Violent } else { VerdictLabel::NonViolent })
    })?;
    Ok(acc)
}

fn cmd_train_tsn(cli: &Cli, args: &TrainTsnArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let clips = load_clip_dataset(&args.data)?;
    let (train, test) = split_dataset(&clips, cfg.tsn.train.seed)?;
    println!("training tsn on {} clips ({} held out)", train.len(), test.len());

    let detector = match (&args.detector, args.full_frame || cfg.tsn.full_frame) {
        (_, true) => None,
        (Some(p), false) => Some(load_checkpoint(p)?),
        (None, false) => bail!("--detector is required unless --full-frame is set"),
    };
    let source = match &detector {
        Some(d) => SnippetSource::DetectorCrops {
            detector: d,
            det_cfg: &cfg.detector.config,
            pipe: &cfg.pipeline,
        },
        None => SnippetSource::FullFrame,
    };
    let mut tsn_cfg = cfg.tsn.config;
    tsn_cfg.input_size = cfg.pipeline.crop_size;
    let trained = train_tsn(&train, &tsn_cfg, source, &cfg.tsn.train)?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {e:>3}  loss {l:.5}");
    }
    fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("tsn.ckpt");
    save_checkpoint(&trained.graph, &ckpt)?;
    println!("saved {}", ckpt.display());

    let acc = match &detector {
        Some(d) => {
            let models = PipelineModels {
                detector: d,
                det_cfg: &cfg.detector.config,
                tsn: &trained.graph,
                tsn_cfg: &tsn_cfg,
            };
            eval_acc(&test, |clip| {
                Ok(run_pipeline(clip, &models, &cfg.pipeline, cfg.tsn.train.seed)?.label)
            })?
        }
        None => full_frame_acc(&test, &trained.graph, &tsn_cfg, cfg.tsn.train.seed)?,
    };
    println!("held-out ACC {acc:.3}");
    Ok(())
}

fn cmd_prune(cli: &Cli, args: &PruneArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let graph = load_graph_file(&args.graph)?;
    let spec =
        TensorSpec::new(1, 3, cfg.detector.config.input_size, cfg.detector.config.input_size)?;
    let before = cost_report(&graph, &spec)?;
    let plan = build_plan(&graph, args.ratio)?;
    let pruned = apply_plan(&graph, &plan)?;
    let after = cost_report(&pruned, &spec)?;
    fs::write(&args.out, graph_to_json(&pruned, true)?)?;
    let plan_path = args.out.with_extension("plan.json");
    fs::write(&plan_path, plan.to_json()?)?;
    let (dp, df) = after.reduction_vs(&before);
    println!(
        "params {} -> {} (-{:.1}%)   flops {} -> {} (-{:.1}%)",
        before.params,
        after.params,
        dp * 100.0,
        before.flops,
        after.flops,
        df * 100.0
    );
    if let Some(report) = &args.report {
        let doc = serde_json::json!({ "before": before, "after": after });
        fs::write(report, serde_json::to_string_pretty(&doc)?)?;
        println!("cost report: {}", report.display());
    }
    println!("pruned graph: {} (plan: {})", args.out.display(), plan_path.display());
    Ok(())
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut axes = AblationAxes::default();
    if let Some(b) = &args.backbones {
        axes.backbones = parse_list(b);
    }
    if let Some(a) = &args.attentions {
        axes.attentions = parse_list(a);
    }
    if let Some(r) = &args.ratios {
        axes.prune_ratios = parse_list(r)
            .iter()
            .map(|x| x.parse::<f64>().context("parsing ratio"))
            .collect::<Result<Vec<_>>>()?;
    }
    let report = run_ablation(&axes, args.runs, &cfg)?;
    fs::create_dir_all(&args.out)?;
    let json_path = args.out.join("ablation.json");
    let text_path = args.out.join("ablation.txt");
    fs::write(&json_path, report.to_json()?)?;
    fs::write(&text_path, report.to_text())?;
    print!("{}", report.to_text());
    println!("wrote {} and {}", json_path.display(), text_path.display());
    Ok(())
}

fn cmd_pipeline(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let detector = load_checkpoint(&args.detector)?;
    let tsn = load_checkpoint(&args.tsn)?;
    let clip = load_clip(&args.clip, ClipLabel::Unknown, 10.0)?;
    let mut pipe_cfg = cfg.pipeline;
    pipe_cfg.detect_all_frames |= args.detect_all_frames;
    let mut tsn_cfg = cfg.tsn.config;
    tsn_cfg.input_size = pipe_cfg.crop_size;
    let models = PipelineModels {
        detector: &detector,
        det_cfg: &cfg.detector.config,
        tsn: &tsn,
        tsn_cfg: &tsn_cfg,
    };
    let seed = cli.seed.unwrap_or(0);
    let verdict = run_pipeline(&clip, &models, &pipe_cfg, seed)?;
    fs::write(&args.out, verdict.to_json()?)?;
    println!(
        "p(violence) = {:.4} -> {:?}  ({})",
        verdict.probability,
        verdict.label,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&args.out)?;
    match args.task.as_str() {
        "detection" => {
            let graph = load_checkpoint(&args.model)?;
            let scenes = load_detection_scenes(&args.data)?;
            let metrics = eval_detector(&graph, &scenes, &cfg.detector.config)?;
            let out = args.out.join("detection_metrics.json");
            fs::write(&out, serde_json::to_string_pretty(&metrics)?)?;
            println!(
                "recall {:.3}  mAP@0.5 {:.3}  ({})",
                metrics.recall,
                metrics.map50,
                out.display()
            );
        }
        "video" => {
            let tsn = load_checkpoint(&args.model)?;
            let clips = load_clip_dataset(&args.data)?;
            let mut tsn_cfg = cfg.tsn.config;
            tsn_cfg.input_size = cfg.pipeline.crop_size;
            let seed = cli.seed.unwrap_or(0);
            let acc = match &args.detector {
                Some(d) => {
                    let detector = load_checkpoint(d)?;
                    let models = PipelineModels {
                        detector: &detector,
                        det_cfg: &cfg.detector.config,
                        tsn: &tsn,
                        tsn_cfg: &tsn_cfg,
                    };
                    eval_acc(&clips, |clip| {
                        Ok(run_pipeline(clip, &models, &cfg.pipeline, seed)?.label)
                    })?
                }
                None => full_frame_acc(&clips, &tsn, &tsn_cfg, seed)?,
            };
            let out = args.out.join("video_metrics.json");
            fs::write(&out, serde_json::to_string_pretty(&serde_json::json!({ "acc": acc }))?)?;
            println!("ACC {acc:.3}  ({})", out.display());
        }
        other => bail!("unknown task '{other}' (expected detection|video)"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&cli, args),
        Command::Split(args) => cmd_split(&cli, args),
        Command::TrainDetector(args) => cmd_train_detector(&cli, args),
        Command::TrainTsn(args) => cmd_train_tsn(&cli, args),
        Command::Prune(args) => cmd_prune(&cli, args),
        Command::Ablate(args) => cmd_ablate(&cli, args),
        Command::Pipeline(args) => cmd_pipeline(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
    }
}
