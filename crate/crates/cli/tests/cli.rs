use std::fs;
use std::process::Command;

fn saq() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_saq"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn sample_with_config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"model": "analytic", "eval": {"chains": 128, "reference_samples": 128}}"#).unwrap();
    let out = tmp.path().join("out");
    let status = saq()
        .args(["sample", "--config"])
        .arg(&cfg)
        .args(["--seed", "3", "--override", "grid.steps=8", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["config"]["grid"]["steps"], 8);
    assert!(out.join("trajectories.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| saq().args(args).current_dir(tmp.path()).status().unwrap().code();
    assert_eq!(code(&["sample", "--override", "nonsense=1"]), Some(2));
    assert_eq!(code(&["bogus-kind"]), Some(2));
    assert_eq!(code(&["sample", "--config", "missing.json"]), Some(2));
    assert_eq!(
        code(&["evaluate", "--override", "base_checkpoint=\"absent.json\"", "--out", "e"]),
        Some(3)
    );
    assert_eq!(
        code(&["train", "--override", "train.adam.lr=1e200", "--override", "train.steps=50", "--out", "d"]),
        Some(4)
    );
}

#[test]
fn print_config_emits_resolved_defaults() {
    let out = saq().args(["finetune-qlora", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["kind"], "finetune-qlora");
    assert_eq!(v["qlora"]["steps"], serde_json::json!([100, 50, 20]));
}
