use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stitchlab"));
    c.env("STITCHLAB_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn last_json_line(bytes: &[u8]) -> Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().last().expect("some output");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

const TINY: &str = r#"{
  "seed": 5,
  "diffusion": { "steps": 40, "beta_start": 0.0001, "beta_end": 0.02 },
  "loss": { "ocr_gate_t": 10 },
  "prior": { "high_noise_t": 30 },
  "train": { "steps": 3, "batch_size": 2 },
  "dataset": { "train": 10, "test": 20 },
  "eval": { "samples_per_pairing": 2, "pairings": 5, "classifier_epochs": 20 }
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn pipeline_commands_succeed_and_generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");

    let out = run(&["make-dataset", "--config", &cfg, "--out", &s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    let logs = String::from_utf8_lossy(&out.stderr);
    assert!(
        logs.contains("default applied"),
        "missing keys should be logged: {logs}"
    );
    for line in logs.lines() {
        let v: Value = serde_json::from_str(line).expect("log lines are JSON");
        assert!(v.get("level").is_some() && v.get("msg").is_some());
    }

    let out = run(&["train", "--config", &cfg, "--dataset", &s(&data), "--out", &s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = last_json_line(&out.stdout);
    assert_eq!(summary["steps"], 3);
    assert!(ckpt.join("weights.bin").exists() && ckpt.join("train_log.jsonl").exists());

    let manifest: Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let item = manifest["items"]
        .as_array()
        .unwrap()
        .iter()
        .find(|i| i["split"] == "test" && i["spec"]["anomaly"] != "missing")
        .expect("a visible test scene");
    let bg = data.join(item["image"].as_str().unwrap());
    let mask = data.join(item["mask"].as_str().unwrap());
    let refs = data.join(item["references"].as_str().unwrap());
    let mut images = Vec::new();
    for name in ["a.png", "b.png"] {
        let target = dir.path().join("gen").join(name);
        let out = run(&[
            "generate",
            "--checkpoint",
            &s(&ckpt),
            "--background",
            &s(&bg),
            "--mask",
            &s(&mask),
            "--refs",
            &s(&refs),
            "--seed",
            "11",
            "--out",
            &s(&target),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        images.push(std::fs::read(&target).unwrap());
    }
    assert_eq!(images[0], images[1], "same arguments must give identical bytes");

    let report = dir.path().join("report.json");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        &s(&ckpt),
        "--dataset",
        &s(&data),
        "--out",
        &s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["pairings"].as_array().unwrap().len(), 5);
    assert_eq!(r["pairings"][0]["samples"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_config_lists_every_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{ "train": { "stepz": 3, "batch_size": 2 }, "bogus": 1, "dataset": { "colour": 2 } }"#,
    );
    let out = run(&["make-dataset", "--config", &cfg, "--out", &s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = last_json_line(&out.stderr);
    assert_eq!(err["error"], "config");
    let details: Vec<String> = err["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for key in ["train.stepz", "bogus", "dataset.colour"] {
        assert!(
            details.iter().any(|d| d.contains(key)),
            "{key} not reported in {details:?}"
        );
    }
    assert!(!dir.path().join("d").exists());

    let cfg = write_config(dir.path(), r#"{ "train": { "batch_size": 0, "lr": -1.0 } }"#);
    let out = run(&["make-dataset", "--config", &cfg, "--out", &s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = last_json_line(&out.stderr);
    assert_eq!(err["error"], "config");
    assert_eq!(err["details"].as_array().unwrap().len(), 2);
}

#[test]
fn failures_emit_one_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "evaluate",
        "--checkpoint",
        &s(&dir.path().join("nope")),
        "--dataset",
        &s(dir.path()),
        "--out",
        &s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = last_json_line(&out.stderr);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("nope"));

    let out = run(&["train", "--dataset", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.lines().count(), 1);
    assert_eq!(last_json_line(&out.stderr)["error"], "usage");
}
