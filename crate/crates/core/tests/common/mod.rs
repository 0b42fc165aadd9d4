//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stagepipe::corpus::{write_corpus, Corpus, Report, StageCategory, StageLabel};
use stagepipe::llm::ScriptEntry;
use stagepipe::pipelines::{Method, Predicted, PredictionRecord};

pub fn id(i: usize) -> String {
    format!("r{i:04}")
}

/// Gold label for report `i`: cycles through the four labels of the category.
pub fn gold(i: usize, category: StageCategory) -> StageLabel {
    category.labels()[(i * 7 + 3) % 4]
}

pub fn corpus(n: usize) -> Corpus {
    let reports = (0..n)
        .map(|i| {
            Report::new(
                id(i),
                format!("Report {i}: invasive ductal carcinoma measuring {} mm.", 5 + i % 60),
            )
            .unwrap()
            .with_gold(gold(i, StageCategory::T))
            .with_gold(gold(i, StageCategory::N))
        })
        .collect();
    Corpus::new(reports, "fixture").unwrap()
}

pub fn write_corpus_file(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    write_corpus(&corpus(n), &path).unwrap();
    path
}

/// Some label other than `label` in the same category.
pub fn wrong(label: StageLabel) -> StageLabel {
    label.category().labels()[(label.index() + 1) % 4]
}

/// One record per id, exactly `n_wrong` of them incorrect (the first ones).
pub fn records_with_errors(
    ids: &[String],
    category: StageCategory,
    n_wrong: usize,
    method: Method,
) -> Vec<PredictionRecord> {
    ids.iter()
        .enumerate()
        .map(|(k, rid)| {
            let i: usize = rid[1..].parse().unwrap();
            let g = gold(i, category);
            let p = if k < n_wrong { wrong(g) } else { g };
            let mut r = PredictionRecord::new(rid.clone(), category, Predicted::Label(p), "", method);
            if method.uses_memory() {
                r.memory_version = Some(1);
            }
            if method.uses_retrieval() {
                r.retrieved_chunk_ids = Some(vec![0]);
            }
            r
        })
        .collect()
}

pub fn staged(stage: &str) -> Value {
    json!({"reasoning": "size and nodes", "stage": stage})
}

pub fn with_rules(stage: &str, rules: &[&str]) -> Value {
    json!({"reasoning": "size and nodes", "stage": stage, "rules": rules})
}

/// A replay script covering KEwLTM induction and inference for any number of
/// reports: a few keyed update steps, then reusable defaults.
pub fn kewltm_script() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::template_default("ltm_elicit", with_rules("T2", &["T1: tumor up to 20 mm"])),
        ScriptEntry::keyed("ltm_update", 1, with_rules("T1", &["unrelated note"])),
        ScriptEntry::keyed("ltm_update", 2, with_rules("T2", &["T1: tumor up to 21 mm"])),
        ScriptEntry::keyed(
            "ltm_update",
            3,
            with_rules("T2", &["T1: tumor up to 20 mm", "T2: 20 to 50 mm"]),
        ),
        ScriptEntry::template_default("ltm_update", with_rules("T2", &["T1: tumor up to 20 mm"])),
        ScriptEntry::template_default("ltm_inference", staged("T2")),
    ]
}

pub fn write_script(dir: &Path, entries: &[ScriptEntry]) -> PathBuf {
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string_pretty(entries).unwrap()).unwrap();
    path
}

/// Every file under `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Levenshtein distance straight from the recursive definition, memoized.
pub fn naive_distance(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}
