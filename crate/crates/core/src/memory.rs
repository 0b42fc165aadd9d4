//! Long-term rule memory and the edit-distance gate that controls its evolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::StageCategory;
use crate::error::{Error, Result};

/// An ordered, versioned list of natural-language staging rules for one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMemory {
    category: StageCategory,
    version: u64,
    rules: Vec<String>,
}

impl RuleMemory {
    /// The empty memory a fresh induction starts from.
    pub fn empty(category: StageCategory) -> Self {
        RuleMemory {
            category,
            version: 0,
            rules: Vec::new(),
        }
    }

    /// Builds a memory from rule strings; rules are trimmed and must be non-empty.
    pub fn new(category: StageCategory, rules: Vec<String>, version: u64) -> Result<Self> {
        Ok(RuleMemory {
            category,
            version,
            rules: normalize_rules(rules)?,
        })
    }

    pub fn category(&self) -> StageCategory {
        self.category
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn rules(&self) -> &[String] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules joined by single newlines; the form the gate measures.
    pub fn serialize(&self) -> String {
        serialize_rules(&self.rules)
    }

    /// Rules as a numbered list, the form bound into prompts.
    pub fn render_numbered(&self) -> String {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {}", i + 1, r))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Pretty JSON with a trailing newline; the on-disk format.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("memory serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_file(path.as_ref(), self.to_json().as_bytes())
    }

    /// Loads and validates a memory file, optionally checking its category.
    pub fn load(path: impl AsRef<Path>, expected: Option<StageCategory>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, expected)
    }

    pub fn from_json(text: &str, expected: Option<StageCategory>) -> Result<Self> {
        let raw: RuleMemory = serde_json::from_str(text)?;
        if let Some(expected) = expected {
            if raw.category != expected {
                return Err(Error::CategoryMismatch {
                    expected,
                    found: raw.category,
                });
            }
        }
        RuleMemory::new(raw.category, raw.rules, raw.version)
    }
}

fn normalize_rules(rules: Vec<String>) -> Result<Vec<String>> {
    rules
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let t = r.trim();
            if t.is_empty() {
                Err(Error::InvalidMemory(format!("rule {} is empty", i + 1)))
            } else {
                Ok(t.to_string())
            }
        })
        .collect()
}

pub fn serialize_rules<S: AsRef<str>>(rules: &[S]) -> String {
    rules.iter().map(|r| r.as_ref().trim()).collect::<Vec<_>>().join("\n")
}

/// Character-level Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    // shared prefix and suffix never contribute
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }

    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (i, lc) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let subst = prev[j] + usize::from(lc != sc);
            cur[j + 1] = subst.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Similarity on a 0–100 scale: `100 * (1 - d / max(|a|, |b|))`, 100 for two empty strings.
pub fn similarity(a: &str, b: &str) -> f64 {
    let max = a.chars().count().max(b.chars().count());
    if max == 0 {
        return 100.0;
    }
    similarity_from_distance(edit_distance(a, b), max)
}

fn similarity_from_distance(distance: usize, max_len: usize) -> f64 {
    if max_len == 0 {
        return 100.0;
    }
    // one rounding step, so exact ratios such as 4/5 land exactly on 80
    (100 * (max_len - distance)) as f64 / max_len as f64
}

/// One step of memory induction, as recorded for the memory-length curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    pub step: usize,
    pub proposed_len: usize,
    pub current_len: usize,
    pub similarity: f64,
    pub accepted: bool,
    /// Raw Levenshtein distance between candidate and prior memory.
    #[serde(skip)]
    pub distance: usize,
}

pub const TRACE_CSV_HEADER: &str = "step,proposed_len,current_len,similarity,accepted";

impl UpdateTrace {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{}",
            self.step, self.proposed_len, self.current_len, self.similarity, self.accepted
        )
    }
}

pub fn traces_to_csv(traces: &[UpdateTrace]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for t in traces {
        out.push_str(&t.csv_row());
        out.push('\n');
    }
    out
}

pub fn traces_from_csv(text: &str) -> Result<Vec<UpdateTrace>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_CSV_HEADER) {
        return Err(Error::InvalidArgument("trace file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::InvalidArgument(format!("bad trace row {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(UpdateTrace {
                step: f[0].parse().map_err(|_| bad())?,
                proposed_len: f[1].parse().map_err(|_| bad())?,
                current_len: f[2].parse().map_err(|_| bad())?,
                similarity: f[3].parse().map_err(|_| bad())?,
                accepted: f[4].parse().map_err(|_| bad())?,
                distance: 0,
            })
        })
        .collect()
}

/// True when a candidate at `similarity` passes a gate at `threshold`.
pub fn gate_accepts(similarity: f64, threshold: f64) -> bool {
    similarity >= threshold
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=100.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 100]"
        )))
    }
}

/// Applies the similarity gate to a candidate rule list.
///
/// An empty memory accepts any candidate. Otherwise the candidate replaces the
/// memory iff its serialization is at least `threshold` similar to the current
/// one. A trace is produced either way.
pub fn gated_update(
    memory: &RuleMemory,
    candidate: Vec<String>,
    threshold: f64,
    step: usize,
) -> Result<(RuleMemory, UpdateTrace)> {
    check_threshold(threshold)?;
    let candidate = normalize_rules(candidate)?;
    let proposed = serialize_rules(&candidate);
    let current = memory.serialize();
    let proposed_len = proposed.chars().count();
    let current_len = current.chars().count();
    let distance = edit_distance(&proposed, &current);
    let sim = similarity_from_distance(distance, proposed_len.max(current_len));

    let accepted = memory.is_empty() || gate_accepts(sim, threshold);
    let next = if accepted {
        RuleMemory {
            category: memory.category,
            version: memory.version + 1,
            rules: candidate,
        }
    } else {
        memory.clone()
    };
    let trace = UpdateTrace {
        step,
        proposed_len,
        current_len: if accepted { proposed_len } else { current_len },
        similarity: sim,
        accepted,
        distance,
    };
    Ok((next, trace))
}

/// Trace for a step whose model output could not be parsed; the memory is untouched.
pub fn skipped_step(memory: &RuleMemory, step: usize) -> UpdateTrace {
    UpdateTrace {
        step,
        proposed_len: 0,
        current_len: memory.serialize().chars().count(),
        similarity: 0.0,
        accepted: false,
        distance: 0,
    }
}
