//! Drives the `remoe-lab` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[model]
d_model = 16
n_layers = 1
n_heads = 2
n_groups = 1
d_ffn = 32
n_experts = 4
top_k = 1
context_len = 16

[train]
steps = 50
batch_size = 4
lr_peak = 3e-3
eval_every = 25
eval_batches = 1

[data]
synthetic_bytes = 20000
"#;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remoe-lab"))
        .args(args)
        .env("REMOE_LAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_2() {
    let out = lab(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("here.toml"));
}

#[test]
fn bad_field_exits_2_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = lab(&["train", "--config", s(&cfg), "--set", "train.alpha=0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.alpha"));
}

#[test]
fn smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = lab(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&run.join("metrics.csv")), 50);
    for f in [
        "manifest.json",
        "checkpoint.bin",
        "eval.csv",
        "heatmap_0.json",
        "heatmap_50.json",
        "profile_50.csv",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report = lab(&["report", s(&run)]);
    assert!(report.status.success());
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Paths of leaves that differ between two JSON values.
fn diff(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for k in x.keys().chain(y.keys().filter(|k| !x.contains_key(*k))) {
                diff(&x[k], &y[k], &format!("{path}/{k}"), out);
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                diff(p, q, &format!("{path}/{i}"), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[test]
fn router_override_changes_only_router_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("relu"), dir.path().join("topk"));
    for (out, router) in [(&a, "relu"), (&b, "topk")] {
        let o = lab(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--steps",
            "2",
            "--set",
            &format!("model.router={router}"),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut changed = Vec::new();
    diff(&manifest(&a), &manifest(&b), "", &mut changed);
    changed.retain(|p| p != "/start_time");
    assert_eq!(changed, vec!["/config/model/router".to_string()]);
}

#[test]
fn corrupted_relu_backward_fails_gradcheck() {
    let bad = lab(&["gradcheck", "ops", "--seeds", "1", "--corrupt-relu-backward"]);
    assert_ne!(bad.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL relu"));
    let good = lab(&["gradcheck", "model", "--seeds", "1"]);
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stdout));
}

#[test]
fn single_value_sweep_is_usage_error() {
    let out = lab(&["sweep", "alpha", "--values", "1.2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_records_child_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = lab(&[
        "sweep",
        "alpha",
        "--values",
        "1.2,0.5",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--steps",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let text = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("train.alpha"));
}

#[test]
fn compare_writes_one_row_per_side_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = lab(&[
        "compare",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--steps",
        "5",
        "--set-a",
        "model.router=relu",
        "--set-b",
        "model.router=topk",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_rows(&out_dir.join("compare.csv")), 6);
    assert!(out_dir.join("compare_summary.json").exists());
}

#[test]
fn identical_sides_have_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("same");
    let out = lab(&[
        "compare",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--steps",
        "5",
        "--seeds",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("compare_summary.json")).unwrap()).unwrap();
    let deltas: Vec<f64> = summary["delta_b_minus_a"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_f64().unwrap())
        .collect();
    assert_eq!(deltas.len(), 1);
    assert_eq!(deltas[0], 0.0);
    assert_eq!(summary["mean_delta"].as_f64(), Some(0.0));
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut csvs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = lab(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--seed",
            "7",
            "--steps",
            "20",
        ]);
        assert!(o.status.success());
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let o = lab(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("z")),
        "--seed",
        "8",
        "--steps",
        "20",
    ]);
    assert!(o.status.success());
    assert_ne!(fs::read(dir.path().join("z/metrics.csv")).unwrap(), csvs[0]);
}
