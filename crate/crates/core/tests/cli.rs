use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn rag2(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rag2")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "rag2 {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn offline_workspace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let ws_s = ws.to_str().unwrap();
    rag2(&["demo", "--out", ws_s]);
    let config = ws.join("run.toml");
    let config_s = config.to_str().unwrap();

    rag2(&["index", "--corpus", "textbooks", "--config", config_s]);

    let report = dir.path().join("full.json");
    rag2(&["eval", "--config", config_s, "--mode", "rag2_full", "--out", report.to_str().unwrap()]);
    let r = json(&report);
    assert_eq!(r["n_correct"], 11);
    assert_eq!(r["fallbacks"], 1);
    let preds = std::fs::read_to_string(dir.path().join("full.predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 12);
    assert!(dir.path().join("full.timing.jsonl").exists());

    let again = dir.path().join("again.json");
    rag2(&["eval", "--config", config_s, "--mode", "rag2_full", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());

    let cmp = dir.path().join("cmp.json");
    let table = rag2(&[
        "compare",
        "--config",
        config_s,
        "--modes",
        "closed_book,rag_plain,rag_rationale,rag2_full",
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert!(table.contains("rag2_full"));
    let rows = json(&cmp);
    let correct: Vec<u64> = rows["rows"].as_array().unwrap().iter().map(|r| r["n_correct"].as_u64().unwrap()).collect();
    assert_eq!(correct, vec![6, 7, 9, 11]);
    assert!(dir.path().join("cmp.rag2_full.json").exists());

    let labels = dir.path().join("labels.jsonl");
    rag2(&["label", "--config", config_s, "--out", labels.to_str().unwrap(), "--percentile", "0.25"]);
    let n = std::fs::read_to_string(&labels).unwrap().lines().count();
    assert_eq!(n, 96);
    let cal = json(&dir.path().join("labels.jsonl.calibration.json"));
    assert_eq!(cal["percentile"], 0.25);

    let pairs = dir.path().join("pairs.jsonl");
    std::fs::write(&pairs, "{\"candidate\": \"The cat sat.\", \"reference\": \"the cat\"}\n").unwrap();
    let metrics = dir.path().join("metrics.json");
    rag2(&["metrics", "--pairs", pairs.to_str().unwrap(), "--out", metrics.to_str().unwrap()]);
    let m = json(&metrics);
    assert!((m["mean_rouge_l"]["f1"].as_f64().unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn ingest_registers_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("docs.jsonl");
    std::fs::write(&input, "{\"doc_id\": \"a\", \"body\": \"one two three four five six\"}\n").unwrap();
    let corpora = dir.path().join("corpora");
    rag2(&[
        "ingest",
        "--input",
        input.to_str().unwrap(),
        "--corpus",
        "notes",
        "--corpus-dir",
        corpora.to_str().unwrap(),
        "--window",
        "4",
        "--overlap",
        "1",
    ]);
    let registry = json(&corpora.join("registry.json"));
    assert_eq!(registry["entries"][0]["corpus_id"], "notes");
    assert_eq!(registry["entries"][0]["snippet_count"], 2);
}

#[test]
fn bad_input_fails_with_a_message() {
    let out = Command::new(env!("CARGO_BIN_EXE_rag2"))
        .args(["eval", "--config", "/nonexistent/run.toml", "--out", "/tmp/x.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
