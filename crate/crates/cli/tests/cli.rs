use std::path::Path;
use std::process::{Command, Output};

fn inet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inet"))
        .args(args)
        .env("INET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "data": {"n": 2, "m": 200},
  "corpus": {"train": 6, "valid": 2, "test": 3},
  "lambda": {"epochs": 10},
  "inet": {"epochs": 2, "batch_size": 4, "depth": 2,
           "architecture": {"hidden": [8], "activation": "swish", "dropout": [0.0]}},
  "distill": {"query_count": 200, "sdt": {"epochs": 3}},
  "benchmark": {"trials": 2},
  "sweep": {"sizes": [50, 100], "trials": 1},
  "boundary": {"resolution": 8}
}"#;

#[test]
fn gen_data_writes_dataset_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = inet(&[
        "gen-data",
        "--n",
        "2",
        "--m",
        "1000",
        "--p",
        "5",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["dataset.csv", "dataset.provenance.json", "resolved-config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1001);
    let resolved = std::fs::read_to_string(out.join("resolved-config.json")).unwrap();
    assert!(resolved.contains("\"master_seed\": 1"));
}

#[test]
fn empty_config_resolves_to_cart_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    std::fs::write(&cfg, "").unwrap();
    let out = dir.path().join("o");
    let o = inet(&["validate-config", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(v["distill"]["cart"]["max_depth"], 3);
    assert_eq!(v["distill"]["cart"]["criterion"], "gini");
}

#[test]
fn bad_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lambda": {"learning_rate": -0.1}}"#).unwrap();
    let o = inet(&["validate-config", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let line = stderr(&o);
    let json = line.trim().strip_prefix("error: ").expect("machine-readable line");
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["kind"], "config");
    assert_eq!(v["field"], "lambda.learning_rate");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = inet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn missing_inet_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = inet(&[
        "benchmark",
        "--corpus",
        p(&dir.path().join("none")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("\"missing\""));
}

#[test]
fn bad_thread_count_is_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_inet"))
        .args(["validate-config"])
        .env("INET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let common = ["--config", p(&cfg), "--out", p(&out), "--seed", "3"];
    let step = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(common);
        let o = inet(&all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };

    step(&["build-corpus"]);
    step(&["train-inet", "--family", "standard_dt"]);
    let corpus = out.join("corpus");
    let lambda = std::fs::read_dir(corpus.join("models"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let dot = step(&[
        "interpret",
        "--inet",
        p(&out.join("inet-standard_dt.json")),
        "--lambda",
        p(&lambda),
    ]);
    assert!(dot.starts_with("digraph"), "{dot}");

    step(&["benchmark"]);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    // 3 test λ-nets × (1 I-Net row + 3 strategies × 2 trials).
    assert_eq!(report.lines().count() - 1, 3 * (1 + 3 * 2));
    assert!(out.join("aggregate.csv").exists());

    step(&["sweep-samples"]);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count() - 1, 3 * 2 * 3);

    step(&[
        "distill",
        "--lambda",
        p(&lambda),
        "--family",
        "standard_dt",
        "--strategy",
        "standard_uniform",
    ]);
    let tree = out.join("distill-standard_dt-standard_uniform.json");
    let json = step(&["export-tree", "--tree", p(&tree), "--format", "json"]);
    assert!(json.contains("standard_dt"));

    step(&["boundary", "--model", p(&tree)]);
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 8 * 8);
    assert!(out.join("grid.svg").exists());
}
