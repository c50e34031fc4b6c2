//! End-to-end CLI exercise on a micro configuration: simulate -> train ->
//! reconstruct -> evaluate, plus the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dmsm")
}

fn workdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("dmsm-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn micro_config(dir: &Path) -> PathBuf {
    // Tiny everything: 16x16, 2 coils, 1+1+1 slices, T=3, 6 training steps.
    let cfg = serde_json::json!({
        "dataset_dir": dir.join("data").to_string_lossy(),
        "out_dir": dir.join("run").to_string_lossy(),
        "dataset": {
            "n_train": 1, "n_val": 1, "n_test": 1,
            "height": 16, "width": 16, "n_coils": 2,
            "seed": 3, "accelerations": [2.0], "acs_lines": 2, "mask_seed": 17
        },
        "schedule": { "t_steps": 3, "beta_start": 0.05, "beta_end": 0.3, "kind": "linear" },
        "model": {
            "channels": 4, "n_pab": 1, "concat_blocks": [1],
            "time_embed_dim": 8, "time_mlp_layers": 2, "use_dc": true
        },
        "train": {
            "steps": 6, "lr": 1e-3, "seed": 1,
            "val_interval": 0, "val_paths": 1, "val_slices": 1,
            "acceleration": 2.0
        },
        "inference": { "base_seed": 5, "acceleration": 2.0 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin())
        .args(args)
        .env("DMSM_NUM_THREADS", "2")
        .output()
        .expect("spawn dmsm");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn full_pipeline_micro_run() {
    let dir = workdir("pipeline");
    let cfg = micro_config(&dir);
    let cfg_s = cfg.to_string_lossy();

    let (code, out, err) = run(&["simulate", "--config", &cfg_s]);
    assert_eq!(code, 0, "simulate failed: {err}");
    assert!(out.contains("3 slices"), "unexpected simulate output: {out}");
    assert!(dir.join("data/manifest.json").exists());

    // Re-running without --force must refuse with a usage error.
    let (code, _, err) = run(&["simulate", "--config", &cfg_s]);
    assert_eq!(code, 1, "expected refusal, got: {err}");
    assert!(err.contains("--force"), "refusal should mention --force: {err}");
    let (code, _, _) = run(&["simulate", "--config", &cfg_s, "--force"]);
    assert_eq!(code, 0);

    let (code, out, err) = run(&["train", "--config", &cfg_s]);
    assert_eq!(code, 0, "train failed: {err}\n{out}");
    assert!(dir.join("run/last.ckpt").exists());
    assert!(dir.join("run/best.ckpt").exists());
    assert!(dir.join("run/train_log.jsonl").exists());
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6, "one log record per step");

    // The supervised variant is a flag away and records its mode.
    let (code, _, err) = run(&[
        "train", "--config", &cfg_s, "--mode", "supervised",
        "--set", &format!("out_dir={}", dir.join("run-sup").to_string_lossy()),
    ]);
    assert_eq!(code, 0, "supervised train failed: {err}");
    let snapshot = std::fs::read_to_string(dir.join("run-sup/config.json")).unwrap();
    assert!(snapshot.contains("\"mode\": \"supervised\""), "config snapshot: {snapshot}");

    // Resume continues step numbering without redoing work.
    let (code, out, _) = run(&[
        "train", "--config", &cfg_s, "--resume", "--set", "train.steps=8",
    ]);
    assert_eq!(code, 0, "resume failed: {out}");
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8, "resume must append steps 7..8");

    let (code, out, err) = run(&["reconstruct", "--config", &cfg_s, "--paths", "2"]);
    assert_eq!(code, 0, "reconstruct failed: {err}\n{out}");
    let slice_dir = dir.join("run/recon/0002");
    for f in [
        "mean.img.raw",
        "mean.img.raw.meta.json",
        "uncertainty.raw",
        "recon.png",
        "error.png",
        "uncertainty.png",
        "manifest.json",
    ] {
        assert!(slice_dir.join(f).exists(), "missing output {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(slice_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_paths"], 2);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 2);
    assert!(manifest["checkpoint_hash"].as_str().unwrap().len() == 16);

    let (code, out, err) = run(&["evaluate", "--config", &cfg_s]);
    assert_eq!(code, 0, "evaluate failed: {err}\n{out}");
    assert!(dir.join("run/report.json").exists());
    assert!(dir.join("run/report.csv").exists());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("run/report.json")).unwrap()).unwrap();
    assert!(report["aggregate"]["dmsm"]["psnr_db"]["mean"].is_number());
    assert!(report["aggregate"]["zero_filled"]["psnr_db"]["mean"].is_number());
    assert!(out.contains("zero-filled"), "table should include the baseline row: {out}");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn simulate_emits_every_requested_acceleration() {
    let dir = workdir("masks");
    let cfg = serde_json::json!({
        "dataset_dir": dir.join("data").to_string_lossy(),
        "out_dir": dir.join("run").to_string_lossy(),
        "dataset": {
            "n_train": 1, "n_val": 1, "n_test": 1,
            "height": 16, "width": 16, "n_coils": 1,
            "seed": 3, "accelerations": [2.0, 4.0], "acs_lines": 2, "mask_seed": 17
        },
        "train": { "acceleration": 2.0 },
        "inference": { "acceleration": 2.0 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let (code, out, err) = run(&["simulate", "--config", &path.to_string_lossy()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("R=2") && out.contains("R=4"), "both mask sets listed: {out}");
    assert!(dir.join("data/masks/r2/0000.mask.raw").exists());
    assert!(dir.join("data/masks/r4/0000.mask.raw").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn single_path_uncertainty_is_black_and_default_is_15() {
    let dir = workdir("paths");
    let cfg = micro_config(&dir);
    let cfg_s = cfg.to_string_lossy();
    for cmd in ["simulate", "train"] {
        let (code, _, err) = run(&[cmd, "--config", &cfg_s]);
        assert_eq!(code, 0, "{err}");
    }

    // N=1: the uncertainty map is identically zero, so its rendering is
    // uniformly black.
    let (code, _, err) = run(&["reconstruct", "--config", &cfg_s, "--paths", "1"]);
    assert_eq!(code, 0, "{err}");
    let (std_map, _) = read_float_raw(&dir.join("run/recon/0002/uncertainty.raw"));
    assert!(std_map.iter().all(|&v| v == 0.0), "N=1 must give zero uncertainty");

    // Flag omitted: the paper default of 15 paths applies (micro config does
    // not pin inference.paths).
    let (code, _, err) = run(&["reconstruct", "--config", &cfg_s]);
    assert_eq!(code, 0, "{err}");
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.join("run/recon/0002/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["n_paths"], 15);
    std::fs::remove_dir_all(&dir).ok();
}

/// Minimal float32 sidecar reader (mirrors the library format) so the test
/// does not need the dmsm crate as a dev-dependency.
fn read_float_raw(path: &Path) -> (Vec<f64>, Vec<usize>) {
    let meta: serde_json::Value = serde_json::from_slice(
        &std::fs::read(path.with_file_name(format!(
            "{}.meta.json",
            path.file_name().unwrap().to_string_lossy()
        )))
        .unwrap(),
    )
    .unwrap();
    assert_eq!(meta["dtype"], "float32");
    let shape: Vec<usize> =
        meta["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    let bytes = std::fs::read(path).unwrap();
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    (values, shape)
}

#[test]
fn exit_codes_contract() {
    let dir = workdir("exitcodes");

    // Unknown flag: usage error 1.
    let (code, _, _) = run(&["train", "--bogus-flag"]);
    assert_eq!(code, 1);

    // Config with unknown key: usage error 1.
    let bad = dir.join("bad.json");
    std::fs::write(&bad, br#"{"not_a_key": 1}"#).unwrap();
    let (code, _, err) = run(&["train", "--config", &bad.to_string_lossy()]);
    assert_eq!(code, 1, "{err}");

    // Bad --set override: usage error 1.
    let (code, _, _) = run(&["train", "--set", "train.steps=nope"]);
    assert_eq!(code, 1);

    // Missing dataset at runtime: exit 2.
    let cfg = micro_config(&dir);
    let (code, _, err) = run(&["train", "--config", &cfg.to_string_lossy()]);
    assert_eq!(code, 2, "missing dataset should be a runtime failure: {err}");

    // Checkpoint/architecture mismatch: nonzero with a diagnostic.
    let cfg_s = cfg.to_string_lossy();
    let (code, _, _) = run(&["simulate", "--config", &cfg_s]);
    assert_eq!(code, 0);
    let (code, _, _) = run(&["train", "--config", &cfg_s]);
    assert_eq!(code, 0);
    let (code, _, err) = run(&[
        "reconstruct", "--config", &cfg_s, "--set", "model.channels=8",
    ]);
    assert_eq!(code, 2, "architecture mismatch must fail: {err}");
    assert!(err.contains("mismatch"), "diagnostic should mention the mismatch: {err}");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn reconstruct_seed_manifest_enables_rerun() {
    let dir = workdir("rerun");
    let cfg = micro_config(&dir);
    let cfg_s = cfg.to_string_lossy();
    for cmd in [vec!["simulate"], vec!["train"]] {
        let mut args = cmd.clone();
        args.extend(["--config", &cfg_s]);
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
    }
    let (code, _, _) = run(&["reconstruct", "--config", &cfg_s]);
    assert_eq!(code, 0);
    let first = std::fs::read(dir.join("run/recon/0002/mean.img.raw")).unwrap();

    // Same seeds, same bytes.
    let (code, _, _) = run(&["reconstruct", "--config", &cfg_s]);
    assert_eq!(code, 0);
    let second = std::fs::read(dir.join("run/recon/0002/mean.img.raw")).unwrap();
    assert_eq!(first, second, "identical seeds must reproduce outputs bitwise");

    // Different seed changes the draw.
    let (code, _, _) = run(&["reconstruct", "--config", &cfg_s, "--seed", "999"]);
    assert_eq!(code, 0);
    let third = std::fs::read(dir.join("run/recon/0002/mean.img.raw")).unwrap();
    assert_ne!(first, third, "a different base seed must change the reconstruction");

    std::fs::remove_dir_all(&dir).ok();
}
