//! End-to-end runs of the `docmsu` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docmsu_core::data::{load_dataset, LoadOptions};
use docmsu_core::model::eval::oracle_predictions;
use serde_json::Value;

fn docmsu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docmsu"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = docmsu(args);
    assert!(
        out.status.success(),
        "docmsu {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn fixtures(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join("fx");
    ok(&["gen-fixtures", "--n", &n.to_string(), "--image-size", "32", "--seed", &seed.to_string(), "--out", s(&out)]);
    out.join("data.jsonl")
}

fn train_tiny(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("train");
    let mut args = vec!["train", "--data", s(data), "--preset", "test", "--max-steps", "2", "--batch-size", "4"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", s(&out)]);
    ok(&args);
    out
}

#[test]
fn empty_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    let out = docmsu(&["ingest", "--input", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_line_exits_2_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 3, 0);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    fs::write(&data, text).unwrap();
    let out = docmsu(&["ingest", "--input", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":4:"));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 3, 0);
    let ck = dir.path().join("nope.safetensors");
    let out = docmsu(&["evaluate", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = docmsu(&["visualize-attention", "--checkpoint", s(&ck), "--data", s(&data), "--id", "x"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_config_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = docmsu(&["--config", s(&dir.path().join("c.json")), "gen-fixtures", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_with_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"widht": 8}}"#).unwrap();
    let out = docmsu(&["--config", s(&cfg), "gen-fixtures", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixtures_have_a_third_sarcastic_and_ingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 90, 4);
    let fx_dir = data.parent().unwrap();

    let first = dir.path().join("i1");
    ok(&["ingest", "--input", s(&data), "--out", s(&first)]);
    let stats = read_json(first.join("stats.json"));
    assert_eq!(stats["records"], 90);
    assert_eq!(stats["sarcastic"], 30);
    assert!(stats["token_lengths"]["max"].as_u64().unwrap() <= 100);
    let manifest = read_json(first.join("manifest.json"));
    assert_eq!(manifest["command"], "ingest");

    let second = dir.path().join("i2");
    ok(&["ingest", "--input", s(&first.join("dataset.jsonl")), "--image-root", s(fx_dir), "--out", s(&second)]);
    assert_eq!(
        fs::read(first.join("dataset.jsonl")).unwrap(),
        fs::read(second.join("dataset.jsonl")).unwrap()
    );
}

fn annotation(id: &str, start: usize, x: f64) -> Value {
    serde_json::json!({"annotator_id": id, "spans": [[start, start + 3]], "boxes": [[x, 0.0, 20.0, 20.0]]})
}

#[test]
fn validate_annotations_flags_five_of_a_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("triples.jsonl");
    let lines: Vec<String> = (0..100)
        .map(|i| {
            let shift = (i % 7) as f64;
            let triple = serde_json::json!({
                "id": format!("s{i:03}"),
                "annotations": [annotation("a", 2, 0.0), annotation("b", 2 + i % 3, shift), annotation("c", 2, 2.0 * shift)],
            });
            triple.to_string()
        })
        .collect();
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("o");
    ok(&["validate-annotations", "--input", s(&input), "--out", s(&out)]);
    let reports: Vec<Value> = fs::read_to_string(out.join("confidence.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 100);
    assert_eq!(reports.iter().filter(|r| r["challenging"] == true).count(), 5);
    // i = 0 is an identical triple
    for name in ["a", "b", "c"] {
        assert_eq!(reports[0]["per_annotator"][name], 4.0);
    }
    assert_eq!(reports[0]["best"], "a");
}

#[test]
fn oracle_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 12, 1);
    let gold = load_dataset(&data, &LoadOptions::default()).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let lines: Vec<String> = oracle_predictions(&gold)
        .iter()
        .map(|p| serde_json::to_string(p).unwrap())
        .collect();
    fs::write(&preds, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("o");
    ok(&["evaluate", "--predictions", s(&preds), "--gold", s(&data), "--out", s(&out)]);
    let report = read_json(out.join("metrics.json"));
    for key in ["em", "em50", "em70", "ap50", "ap60", "f1_50", "f1_60", "acc", "precision", "f1"] {
        assert_eq!(report[key], 1.0, "{key}");
    }
    assert_eq!(report["bit_error"], 0.0);
}

#[test]
fn train_evaluate_and_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 20, 2);
    let out = train_tiny(dir.path(), &data, &["--seed", "5"]);
    let ck = out.join("checkpoint.safetensors");
    for f in ["history.json", "run_manifest.json", "val_metrics.json", "test_metrics.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = read_json(out.join("run_manifest.json"));
    assert_eq!(manifest["model"]["seed"], 5);

    let eval_out = dir.path().join("eval");
    ok(&["evaluate", "--checkpoint", s(&ck), "--data", s(&data), "--split", "all", "--out", s(&eval_out)]);
    let report = read_json(eval_out.join("metrics.json"));
    assert!(report["acc"].as_f64().unwrap() >= 0.0);
    let n_preds = fs::read_to_string(eval_out.join("predictions.jsonl")).unwrap().lines().count();
    assert_eq!(n_preds, 20);

    let gold = load_dataset(&data, &LoadOptions::default()).unwrap();
    let sarcastic = gold.iter().find(|r| r.sarcastic).unwrap().id.clone();
    let plain = gold.iter().find(|r| !r.sarcastic).unwrap().id.clone();
    let render = |id: &str, name: &str| {
        let o = dir.path().join(name);
        ok(&["visualize-attention", "--checkpoint", s(&ck), "--data", s(&data), "--id", id, "--out", s(&o)]);
        let mut pngs: Vec<PathBuf> = fs::read_dir(&o)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        pngs.sort();
        pngs
    };
    let a = render(&sarcastic, "viz-a");
    let b = render(&sarcastic, "viz-b");
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(render(&plain, "viz-plain").len(), 4);

    let out = docmsu(&["visualize-attention", "--checkpoint", s(&ck), "--data", s(&data), "--id", "absent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seeds_report_mean_and_variance() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 20, 3);
    let out = train_tiny(dir.path(), &data, &["--seeds", "2"]);
    let summary = read_json(out.join("seeds_summary.json"));
    assert_eq!(summary["seeds"], serde_json::json!([0, 1]));
    assert!(summary["mean"]["acc"].is_number());
    assert!(summary["variance"]["acc"].as_f64().unwrap() >= 0.0);
    assert!(out.join("seed-0/checkpoint.safetensors").exists());
    assert!(out.join("seed-1/checkpoint.safetensors").exists());
}

#[test]
fn same_seed_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixtures(dir.path(), 20, 6);
    let a = train_tiny(&dir.path().join("a"), &data, &[]);
    let b = train_tiny(&dir.path().join("b"), &data, &[]);
    assert_eq!(
        fs::read(a.join("checkpoint.safetensors")).unwrap(),
        fs::read(b.join("checkpoint.safetensors")).unwrap()
    );
}
