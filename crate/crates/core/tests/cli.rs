use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::{tempdir, TempDir};

const SMALL: &str = r#"{"n_object_classes": 12, "n_relations": 6, "scenes": 40, "d_v": 8, "d_s": 4,
  "n_scene_types": 3, "objects_per_scene": [3, 5]}"#;

fn sgkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgkt"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sgkt(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str]) -> String {
    let out = sgkt(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Generates the small dataset into `<tmp>/data` and returns the temp root.
fn small_data(seed: &str) -> TempDir {
    let tmp = tempdir().unwrap();
    let cfg = tmp.path().join("gen.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--seed",
        seed,
        "--config",
        p(&cfg),
    ]);
    tmp
}

fn train_small(tmp: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = tmp.join(name);
    let data = tmp.join("data");
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--epochs",
        "2",
        "--set",
        "d_s=4",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let a = small_data("3");
    let b = small_data("3");
    let c = small_data("4");
    for f in [
        "train.jsonl",
        "test.jsonl",
        "meta.json",
        "detections.jsonl",
        "stats.json",
    ] {
        let read = |t: &TempDir| fs::read(t.path().join("data").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
        if f.ends_with(".jsonl") {
            assert_ne!(read(&a), read(&c), "{f}");
        }
    }
}

#[test]
fn stats_histograms_sum_to_triple_counts() {
    let tmp = small_data("1");
    let stats = read_json(&tmp.path().join("data/stats.json"));
    let sum = |k: &str| {
        stats[k]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum::<u64>()
    };
    assert_eq!(
        sum("train_relation_histogram"),
        stats["train_triples"].as_u64().unwrap()
    );
    assert_eq!(
        sum("test_relation_histogram"),
        stats["test_triples"].as_u64().unwrap()
    );
    assert_eq!(stats["train_relation_histogram"][0], 0);
}

#[test]
fn missing_out_is_a_usage_error() {
    let err = stderr_of(&["gen-data", "--seed", "1"]);
    assert!(err.contains("--out"), "{err}");
}

#[test]
fn fc_without_kt_is_rejected() {
    let tmp = small_data("1");
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let err = stderr_of(&["train", "--data", p(&data), "--out", p(&out), "--no-kt"]);
    assert!(err.contains("fc requires kt"), "{err}");
}

#[test]
fn eval_reproduces_training_metrics() {
    let tmp = small_data("2");
    let run = train_small(tmp.path(), "run", &[]);
    for f in [
        "config.json",
        "model.ckpt",
        "train_log.jsonl",
        "metrics.json",
        "metrics.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ev = tmp.path().join("eval");
    ok(&[
        "eval",
        "--data",
        p(&tmp.path().join("data")),
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--out",
        p(&ev),
    ]);
    assert_eq!(
        read_json(&run.join("metrics.json")),
        read_json(&ev.join("metrics.json"))
    );
}

#[test]
fn eval_modes_and_tasks() {
    let tmp = small_data("5");
    let run = train_small(tmp.path(), "run", &[]);
    let data = tmp.path().join("data");
    let ckpt = run.join("model.ckpt");
    let ev = tmp.path().join("eval");
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&ev),
        "--task",
        "predcls",
        "--mode",
        "both",
    ]);
    let report = read_json(&ev.join("metrics.json"));
    let tasks = report["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0]["modes"].as_array().unwrap().len(), 2);

    ok(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&ev),
        "--task",
        "all",
    ]);
    let report = read_json(&ev.join("metrics.json"));
    assert_eq!(report["tasks"].as_array().unwrap().len(), 3);

    fs::remove_file(data.join("detections.jsonl")).unwrap();
    let err = stderr_of(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&ev),
        "--task",
        "sgdet",
    ]);
    assert!(err.contains("--detections"), "{err}");
}

#[test]
fn tail_report_compares_against_baseline() {
    let tmp = small_data("6");
    let full = train_small(tmp.path(), "full", &[]);
    let base = train_small(tmp.path(), "base", &["--no-kt", "--no-fc"]);
    let ev = tmp.path().join("tail");
    let out = ok(&[
        "eval",
        "--data",
        p(&tmp.path().join("data")),
        "--checkpoint",
        p(&full.join("model.ckpt")),
        "--baseline",
        p(&base.join("model.ckpt")),
        "--out",
        p(&ev),
        "--report",
        "tail",
        "--bottom",
        "3",
    ]);
    assert!(out.contains("R@50"));
    let tail = read_json(&ev.join("tail.json"));
    let rows = tail["model"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(tail["baseline"].as_array().unwrap().len(), 3);
    for r in rows {
        assert_eq!(r["test_count"] == 0, r["r50"].is_null());
    }
}

#[test]
fn ablate_single_seed_has_four_ordered_rows() {
    let tmp = small_data("7");
    let out = tmp.path().join("ablate");
    ok(&[
        "ablate",
        "--data",
        p(&tmp.path().join("data")),
        "--out",
        p(&out),
        "--seeds",
        "1",
        "--epochs",
        "1",
        "--set",
        "d_s=4",
    ]);
    let rows = read_json(&out.join("ablation.json"))["rows"]
        .as_array()
        .unwrap()
        .clone();
    let names: Vec<&str> = rows
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["BL", "BL+SO", "BL+SO+KT", "BL+SO+KT+FC"]);
    assert!(fs::read_to_string(out.join("ablation.txt"))
        .unwrap()
        .contains("mean"));
}

#[test]
fn unknown_set_key_is_rejected() {
    let tmp = small_data("1");
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let err = stderr_of(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--set",
        "bogus=1",
    ]);
    assert!(err.contains("bogus"), "{err}");
}
