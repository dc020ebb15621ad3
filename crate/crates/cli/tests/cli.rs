use std::path::Path;
use std::process::{Command, Output};

use radiomae::datamodel::load_manifest;
use serde_json::Value;

fn radiomae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiomae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error line in {text:?}"));
    serde_json::from_str(line).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = radiomae(&["synth", "--n-normal", "3", "--n-abnormal", "2", "--size", "32", "--seed", "5", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 5);
    for e in &manifest.entries {
        assert!(manifest.resolve(e).exists());
    }
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "synth");
}

#[test]
fn unknown_task_fails_before_reading_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = radiomae(&["finetune", "--task", "bogus", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "unknown_task");
    assert!(err["error"]["message"].as_str().unwrap().contains("unknown task"));
    assert!(!dir.path().join("run_config.json").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = radiomae(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "unknown_subcommand");
}

#[test]
fn invalid_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let synth = radiomae(&["synth", "--n-normal", "2", "--n-abnormal", "2", "--size", "32", "--out", p(&dir.path().join("data"))]);
    assert!(synth.status.success());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs": "many"}"#).unwrap();
    let out = radiomae(&[
        "pretrain",
        "--manifest",
        p(&dir.path().join("data/manifest.json")),
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "invalid_config");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = radiomae(&["pretrain", "--manifest", p(&dir.path().join("nope.json")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["error"]["kind"], "io");
}

#[test]
fn config_layers_apply_in_order() {
    use radiomae::mae::MaeConfig;
    use radiomae_cli::cli::layered_config;
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"epochs": 7, "batch_size": 4, "optimizer": {"base_lr": 0.01}}"#).unwrap();
    let cfg: MaeConfig = layered_config(MaeConfig::toy(), Some(&file), serde_json::json!({"epochs": 2})).unwrap();
    assert_eq!(cfg.epochs, 2);
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.optimizer.base_lr, 0.01);
    assert_eq!(cfg.patch_size, MaeConfig::toy().patch_size);
}

#[test]
fn pretrain_then_errormap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(radiomae(&["synth", "--n-normal", "6", "--n-abnormal", "0", "--size", "64", "--out", p(&data)]).status.success());
    let run = dir.path().join("mae");
    let out = radiomae(&["pretrain", "--manifest", p(&data.join("manifest.json")), "--epochs", "1", "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = load_manifest(&data.join("manifest.json")).unwrap();
    let image = manifest.resolve(&manifest.entries[0]);
    let maps = dir.path().join("maps");
    let out = radiomae(&["errormap", "--ckpt", p(&run.join("last")), "--image", p(&image), "--passes", "3", "--out", p(&maps)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let score: Value = serde_json::from_str(&std::fs::read_to_string(maps.join("score.json")).unwrap()).unwrap();
    assert!(score["score"].as_f64().unwrap() >= 0.0);
}
