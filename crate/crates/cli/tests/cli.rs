use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn objslot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objslot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn last_json(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("some output");
    serde_json::from_str(line).expect("json line")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_segment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = objslot(&[
        "gen-data", "--out", s(&data), "--clips", "12", "--seed", "3", "--classes", "3", "--frames", "4",
        "--canvas", "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = last_json(&out);
    assert_eq!(summary["clips"], 12);

    let config = serde_json::json!({
        "model": {"frames": 4, "n_slots": 3, "dim": 16, "delta": {"fixed": 1}, "patch": 4,
                  "heads": 2, "iterations": 2, "n_classes": 3},
        "batch_size": 4,
        "epochs": 1,
        "eval_every": 1,
        "lr": 1e-3,
        "data": "data/manifest.json",
        "out": "run",
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let out = objslot(&["train", "--config", s(&config_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["config.json", "train_log.jsonl", "eval_log.jsonl", "report.json", "checkpoint"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let train_lines = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(train_lines.lines().count() as u64, last_json(&out)["step"].as_u64().unwrap());

    let ckpt = run.join("checkpoint");
    let out = objslot(&["eval", "--ckpt", s(&ckpt), "--split", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = last_json(&out)["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let clip = manifest["clips"][0]["id"].as_str().unwrap().to_string();
    let masks = dir.path().join("masks");
    let out = objslot(&["segment", "--ckpt", s(&ckpt), "--clip", &clip, "--out", s(&masks)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json(&out)["clip"], clip.as_str());
    assert!(masks.join(format!("{clip}.stf")).exists());
    assert!(masks.join(format!("{clip}_000.pgm")).exists());

    let out = objslot(&["segment", "--ckpt", s(&ckpt), "--clip", "no-such-clip", "--out", s(&masks)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_prints_one_line_per_module() {
    let out = objslot(&["gradcheck", "--module", "gru"]);
    assert!(out.status.success());
    let r = last_json(&out);
    assert_eq!(r["module"], "gru");
    assert_eq!(r["passed"], true);
}

#[test]
fn bad_inputs_exit_with_one() {
    assert_eq!(objslot(&["gradcheck", "--module", "nope"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"frames": 8, "delta": {"fixed": 8}}}"#).unwrap();
    let out = objslot(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
