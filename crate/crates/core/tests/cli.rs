//! Drives the `stagepipe` binary end to end against scripted backends.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use stagepipe::corpus::StageCategory;
use stagepipe::llm::ScriptEntry;
use stagepipe::pipelines::{records_to_jsonl, Method};

const GUIDELINE: &str = "T1: tumor 20 mm or less in greatest dimension.\n\
T2: tumor more than 20 mm but not more than 50 mm.\n\
T3: tumor more than 50 mm.\n\
T4: tumor of any size with direct extension to the chest wall or skin.\n";

fn stagepipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagepipe"))
        .current_dir(dir)
        .args(args)
        .env_remove("STAGEPIPE_LLM_BASE")
        .env_remove("STAGEPIPE_K")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_predictions(dir: &Path, name: &str, n_reports: usize, n_wrong: usize) -> PathBuf {
    let ids: Vec<String> = (0..n_reports).map(common::id).collect();
    let recs = common::records_with_errors(&ids, StageCategory::T, n_wrong, Method::Zscot);
    let path = dir.join(name);
    std::fs::write(&path, records_to_jsonl(&recs).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_prints_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 12);
    let o = stagepipe(dir.path(), &["ingest", "--corpus", s(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("12 reports"));
}

#[test]
fn ingest_rejects_bad_line_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 4);
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"id\": \"broken\"";
    text = lines.join("\n");
    std::fs::write(&corpus, text).unwrap();
    let o = stagepipe(dir.path(), &["ingest", "--corpus", s(&corpus)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains('3'), "{}", stderr(&o));
}

#[test]
fn retrieval_method_without_guideline_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 4);
    let script = common::write_script(dir.path(), &[]);
    let out = dir.path().join("out");
    let o = stagepipe(
        dir.path(),
        &[
            "run",
            "--category",
            "T",
            "--method",
            "kewrag",
            "--corpus",
            s(&corpus),
            "--script",
            s(&script),
            "--out",
            s(&out),
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("guideline"));
}

#[test]
fn evaluate_renders_error_percentage() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 800);
    let preds = write_predictions(dir.path(), "zscot.jsonl", 800, 110);
    let o = stagepipe(
        dir.path(),
        &["evaluate", "--corpus", s(&corpus), "--predictions", s(&preds)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("13.8%"), "{text}");
    assert!(text.contains(" 110 "), "{text}");
}

#[test]
fn evaluate_rejects_unknown_report_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 5);
    let preds = write_predictions(dir.path(), "p.jsonl", 8, 0);
    let o = stagepipe(
        dir.path(),
        &["evaluate", "--corpus", s(&corpus), "--predictions", s(&preds)],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("r0005"), "{}", stderr(&o));
}

#[test]
fn identical_prediction_files_have_no_unique_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 50);
    let a = write_predictions(dir.path(), "a.jsonl", 50, 9);
    let b = dir.path().join("b.jsonl");
    std::fs::copy(&a, &b).unwrap();
    let o = stagepipe(
        dir.path(),
        &[
            "evaluate",
            "--corpus",
            s(&corpus),
            "--predictions",
            s(&a),
            "--predictions",
            s(&b),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("wrong only in a.jsonl: \n"), "{text}");
    assert!(text.contains("wrong only in b.jsonl: \n"), "{text}");
}

#[test]
fn evaluate_tallies_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let notes = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/error_causes_t.jsonl");
    let o = stagepipe(dir.path(), &["evaluate", "--annotations", notes]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("rag T: total=81"), "{text}");
    assert!(text.contains("kewltm T: total=26"), "{text}");
}

fn sweep_setup(dir: &Path) -> Vec<String> {
    let corpus = common::write_corpus_file(dir, 130);
    let script = common::write_script(dir, &common::kewltm_script());
    ["--category", "T", "--method", "kewltm", "--splits", "2", "--corpus"]
        .iter()
        .map(|a| a.to_string())
        .chain([s(&corpus).to_string(), "--script".into(), s(&script).to_string()])
        .collect()
}

#[test]
fn sweep_over_training_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep".to_string()];
    args.extend(sweep_setup(dir.path()));
    args.extend(["--train-counts", "10,20,30,40,50,60,70,80,90,100", "--out", "sw"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = stagepipe(dir.path(), &argv);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(stagepipe::cli::SWEEP_CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    for split in 0..2 {
        let counts: Vec<&str> = rows
            .iter()
            .filter(|r| r.starts_with(&format!("{split},")))
            .map(|r| r.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(counts, ["10", "20", "30", "40", "50", "60", "70", "80", "90", "100"]);
    }
}

#[test]
fn sweep_over_thresholds_writes_one_curve_each() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep".to_string()];
    args.extend(sweep_setup(dir.path()));
    args.extend(["--thresholds", "0,80", "--n-train", "20", "--out", "sw"].map(String::from));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = stagepipe(dir.path(), &argv);
    assert!(o.status.success(), "{}", stderr(&o));
    let curves = std::fs::read_to_string(dir.path().join("sw/curves.csv")).unwrap();
    let thresholds: std::collections::BTreeSet<&str> =
        curves.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(thresholds.len(), 2, "{curves}");
    assert_eq!(curves.lines().skip(1).count(), 40);
}

#[test]
fn index_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let guideline = dir.path().join("guideline.txt");
    std::fs::write(&guideline, GUIDELINE).unwrap();
    let script = common::write_script(dir.path(), &[ScriptEntry::embedding(None, vec![0.5, 0.25, 1.0])]);
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let o = stagepipe(
            dir.path(),
            &[
                "index",
                "--guideline",
                s(&guideline),
                "--script",
                s(&script),
                "--index-out",
                name,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn kewrag_run_writes_rules_and_chunk_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 6);
    let guideline = dir.path().join("guideline.txt");
    std::fs::write(&guideline, GUIDELINE).unwrap();
    let script = common::write_script(
        dir.path(),
        &[
            ScriptEntry::embedding(None, vec![1.0, 0.0]),
            ScriptEntry::embedding(None, vec![0.8, 0.6]),
            ScriptEntry::template_default("rag_elicit", json!({"rules": ["T1: up to 20 mm", "T2: 20 to 50 mm"]})),
            ScriptEntry::template_default("rag_inference", common::staged("T2")),
        ],
    );
    let o = stagepipe(
        dir.path(),
        &[
            "run",
            "--category",
            "T",
            "--method",
            "kewrag",
            "--corpus",
            s(&corpus),
            "--guideline",
            s(&guideline),
            "--script",
            s(&script),
            "--out",
            "o",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rules = read_json(dir.path().join("o/rules.json"));
    assert_eq!(rules["rules"][0], "T1: up to 20 mm");
    let preds = std::fs::read_to_string(dir.path().join("o/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 6);
    for line in preds.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["retrieved_chunk_ids"], json!([0]));
        assert_eq!(v["memory_version"], 1);
    }
    let manifest = read_json(dir.path().join("o/manifest.json"));
    assert_eq!(manifest["status"], "OK");
    assert!(manifest["doc_hash"].is_string());
}

#[test]
fn zscot_run_manifest_and_env_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 5);
    let script = common::write_script(
        dir.path(),
        &[ScriptEntry::template_default("zscot_inference", common::staged("T1"))],
    );
    let o = Command::new(env!("CARGO_BIN_EXE_stagepipe"))
        .current_dir(dir.path())
        .args([
            "run",
            "--method",
            "zscot",
            "--corpus",
            s(&corpus),
            "--script",
            s(&script),
            "--out",
            "o",
        ])
        .env("STAGEPIPE_CATEGORY", "T")
        .env("STAGEPIPE_MAX_TOKENS", "512")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = read_json(dir.path().join("o/manifest.json"));
    assert_eq!(manifest["status"], "OK");
    assert_eq!(manifest["config"]["max_tokens"], 512);
    assert_eq!(manifest["config"]["category"], "T");
    assert!(manifest["template_hashes"]["zscot_inference"].is_string());
    let metrics = read_json(dir.path().join("o/metrics.json"));
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 1);

    // the manifest replays as a config file
    let again = stagepipe(dir.path(), &["run", "--config", "o/manifest.json", "--out", "o2"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(
        std::fs::read(dir.path().join("o/predictions.jsonl")).unwrap(),
        std::fs::read(dir.path().join("o2/predictions.jsonl")).unwrap()
    );
}

#[test]
fn exhausted_script_leaves_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write_corpus_file(dir.path(), 5);
    let script = common::write_script(dir.path(), &[ScriptEntry::chat(common::staged("T1"))]);
    let o = stagepipe(
        dir.path(),
        &[
            "run",
            "--category",
            "T",
            "--method",
            "zscot",
            "--corpus",
            s(&corpus),
            "--script",
            s(&script),
            "--out",
            "o",
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let manifest = read_json(dir.path().join("o/manifest.json"));
    assert_eq!(manifest["status"], "FAILED");
    assert!(manifest["error"].as_str().unwrap().len() > 3);
}
