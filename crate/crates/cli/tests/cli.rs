//! End-to-end checks of the command-line surface: every subcommand runs and
//! produces the documented artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn visafe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_visafe"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn visafe");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(out.status.success(), "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}");
    stdout
}

/// Tiny config so CLI runs finish in seconds.
fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "detector": {
            "input_size": 64,
            "train": {"epochs": 1, "batch_size": 4, "lr": 0.003, "seed": 5}
        },
        "tsn": {
            "input_size": 32,
            "feature_dim": 16,
            "train": {"epochs": 1, "batch_size": 2, "lr": 0.002, "seed": 5}
        },
        "pipeline": {"crop_size": 32},
        "data": {
            "scene": {"canvas": 64, "actor_count": 1, "motion": "linear",
                      "noise": 5.0, "frames": 6, "seed": 5},
            "detection_count": 10,
            "video_count": 10
        }
    });
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_tiny_config(root);
    let out = root.join("out");

    // gen-data for both kinds
    run_ok(visafe()
        .args(["gen-data", "--kind", "detection"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out)
        .env_remove("VISAFE_CACHE"));
    assert!(out.join("detection_items.json").exists());
    assert!(out.join("detection").join("img_0000.png").exists());
    assert!(out.join("detection").join("img_0000.txt").exists());

    run_ok(visafe()
        .args(["gen-data", "--kind", "video"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out)
        .env_remove("VISAFE_CACHE"));
    assert!(out.join("video").join("violent").exists());
    assert!(out.join("video").join("non_violent").exists());

    // split
    run_ok(visafe()
        .args(["split", "--kind", "detection"])
        .arg("--data").arg(out.join("detection"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(out.join("split")));
    let train: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("split/train.json")).unwrap()).unwrap();
    let test: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("split/test.json")).unwrap()).unwrap();
    assert_eq!(train["items"].as_array().unwrap().len(), 8);
    assert_eq!(test["items"].as_array().unwrap().len(), 2);

    // train detector + tsn (one epoch each)
    let stdout = run_ok(visafe()
        .args(["train-detector", "--variant", "ghost+ema"])
        .arg("--data").arg(out.join("detection"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out));
    assert!(stdout.contains("mAP"));
    let det_ckpt = out.join("detector.ckpt");
    assert!(det_ckpt.exists());

    run_ok(visafe()
        .args(["train-tsn"])
        .arg("--data").arg(out.join("video"))
        .arg("--detector").arg(&det_ckpt)
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out));
    let tsn_ckpt = out.join("tsn.ckpt");
    assert!(tsn_ckpt.exists());

    // prune the detector checkpoint through the CLI contract
    let pruned = out.join("pruned.json");
    let report = out.join("cost.json");
    let stdout = run_ok(visafe()
        .args(["prune", "--ratio", "0.4"])
        .arg("--graph").arg(&det_ckpt)
        .arg("--out").arg(&pruned)
        .arg("--report").arg(&report)
        .arg("--config").arg(&cfg));
    assert!(stdout.contains("params"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let before = doc["before"]["params"].as_u64().unwrap();
    let after = doc["after"]["params"].as_u64().unwrap();
    assert!(after < before);
    // pruned graph JSON is loadable and runnable
    let g = visafe_core::graph::io::load_graph_file(&pruned).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = visafe_core::Tensor::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
    visafe_core::graph::run_graph(&g, &x).unwrap();

    // pipeline on one clip directory
    let clip_dir = {
        let violent = out.join("video/violent");
        let mut dirs: Vec<_> = fs::read_dir(&violent)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        dirs.sort();
        dirs[0].clone()
    };
    let verdict_path = out.join("verdict.json");
    run_ok(visafe()
        .args(["pipeline"])
        .arg("--clip").arg(&clip_dir)
        .arg("--detector").arg(&det_ckpt)
        .arg("--tsn").arg(&tsn_ckpt)
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&verdict_path));
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&verdict_path).unwrap()).unwrap();
    let p = verdict["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(verdict["label"].is_string());
    let frames = verdict["frames"].as_array().unwrap();
    assert!(!frames.is_empty());
    assert!(frames[0]["t"].is_number());
    assert!(frames[0].get("box").is_some());

    // eval both tasks
    let stdout = run_ok(visafe()
        .args(["eval", "--task", "detection"])
        .arg("--model").arg(&det_ckpt)
        .arg("--data").arg(out.join("detection"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out));
    assert!(stdout.contains("recall"));
    let stdout = run_ok(visafe()
        .args(["eval", "--task", "video"])
        .arg("--model").arg(&tsn_ckpt)
        .arg("--detector").arg(&det_ckpt)
        .arg("--data").arg(out.join("video"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out));
    assert!(stdout.contains("ACC"));
}

#[test]
fn gen_data_uses_cache_dir() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_tiny_config(root);
    let cache = root.join("cache");
    let out = root.join("out");

    let s1 = run_ok(visafe()
        .args(["gen-data", "--kind", "detection", "--count", "6"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out)
        .env("VISAFE_CACHE", &cache));
    assert!(s1.contains("generated"));
    let s2 = run_ok(visafe()
        .args(["gen-data", "--kind", "detection", "--count", "6"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out)
        .env("VISAFE_CACHE", &cache));
    assert!(s2.contains("cache hit"), "expected cache hit, got: {s2}");
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_tiny_config(root);
    let out = root.join("out");
    run_ok(visafe()
        .args(["ablate", "--backbones", "ghost", "--attentions", "ema", "--ratios", "0.0", "--runs", "1"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&out));
    assert!(out.join("ablation.json").exists());
    let text = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(text.contains("ghost+ema"));
    assert!(text.contains("Params"));
}
