//! Report corpus ingestion, label sets and seeded train/test splits.
//!
//! Corpus files are JSONL, one report per line:
//!
//! ```text
//! {"id": "r1", "text": "...", "t_label": "T2", "n_label": null}
//! ```
//!
//! Labels are accepted case-insensitively and stored in canonical uppercase.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageCategory {
    T,
    N,
}

impl StageCategory {
    pub const ALL: [StageCategory; 2] = [StageCategory::T, StageCategory::N];

    fn ranks(self) -> std::ops::RangeInclusive<u8> {
        match self {
            StageCategory::T => 1..=4,
            StageCategory::N => 0..=3,
        }
    }

    /// The four legal labels of this category, in rank order.
    pub fn labels(self) -> [StageLabel; 4] {
        let first = *self.ranks().start();
        std::array::from_fn(|i| StageLabel {
            category: self,
            rank: first + i as u8,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageCategory::T => "T",
            StageCategory::N => "N",
        }
    }
}

impl fmt::Display for StageCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" => Ok(StageCategory::T),
            "N" | "n" => Ok(StageCategory::N),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage category {other:?} (expected T or N)"
            ))),
        }
    }
}

impl Serialize for StageCategory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StageCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A pathologic stage label: one of T1..T4 or N0..N3.
///
/// Only legal labels can be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageLabel {
    category: StageCategory,
    rank: u8,
}

impl StageLabel {
    pub fn new(category: StageCategory, rank: u8) -> Result<Self> {
        if category.ranks().contains(&rank) {
            Ok(StageLabel { category, rank })
        } else {
            Err(Error::UnknownLabel(format!("{category}{rank}")))
        }
    }

    pub fn category(self) -> StageCategory {
        self.category
    }

    pub fn rank(self) -> u8 {
        self.rank
    }

    /// Position of the label within its category, 0..4.
    pub fn index(self) -> usize {
        (self.rank - self.category.ranks().start()) as usize
    }

    /// Parses a label and checks that it belongs to `category`.
    pub fn parse_in(s: &str, category: StageCategory) -> Result<Self> {
        let label: StageLabel = s.parse()?;
        if label.category != category {
            return Err(Error::UnknownLabel(format!("{s} is not a {category} label")));
        }
        Ok(label)
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.category, self.rank)
    }
}

impl FromStr for StageLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let mut chars = t.chars();
        let category = match chars.next() {
            Some('T' | 't') => StageCategory::T,
            Some('N' | 'n') => StageCategory::N,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        };
        let rest = chars.as_str();
        if rest.len() != 1 || !rest.as_bytes()[0].is_ascii_digit() {
            return Err(Error::UnknownLabel(s.to_string()));
        }
        StageLabel::new(category, rest.as_bytes()[0] - b'0').map_err(|_| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for StageLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StageLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub id: String,
    pub text: String,
    pub gold: BTreeMap<StageCategory, StageLabel>,
}

impl Report {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if id.trim().is_empty() {
            return Err(Error::InvalidArgument("report id is empty".into()));
        }
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!("report {id:?} has empty text")));
        }
        Ok(Report {
            id,
            text,
            gold: BTreeMap::new(),
        })
    }

    pub fn with_gold(mut self, label: StageLabel) -> Self {
        self.gold.insert(label.category(), label);
        self
    }

    pub fn gold(&self, category: StageCategory) -> Option<StageLabel> {
        self.gold.get(&category).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportLine {
    id: String,
    text: String,
    #[serde(default, alias = "t")]
    t_label: Option<String>,
    #[serde(default, alias = "n")]
    n_label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    reports: Vec<Report>,
    source: String,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(reports: Vec<Report>, source: impl Into<String>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(reports.len());
        for (i, r) in reports.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus {
            reports,
            source: source.into(),
            by_id,
        })
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Report> {
        self.by_id.get(id).map(|&i| &self.reports[i])
    }

    /// Resolves ids to reports, preserving the order of `ids`.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Report>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::UnknownReport(id.clone())))
            .collect()
    }

    /// Per-label gold counts for a category, plus the number of reports without a label.
    pub fn label_counts(&self, category: StageCategory) -> ([usize; 4], usize) {
        let mut counts = [0; 4];
        let mut missing = 0;
        for r in &self.reports {
            match r.gold(category) {
                Some(l) => counts[l.index()] += 1,
                None => missing += 1,
            }
        }
        (counts, missing)
    }

    /// Renders the per-category label distribution as a plain-text table.
    pub fn distribution_table(&self) -> String {
        let mut out = String::new();
        for category in StageCategory::ALL {
            let (counts, missing) = self.label_counts(category);
            let labels = category.labels();
            out.push_str(&format!("{:<12}", format!("{category} Category")));
            for l in labels {
                out.push_str(&format!("{:>6}", l.to_string()));
            }
            out.push_str(&format!("{:>8}{:>10}\n", "Total", "Missing"));
            out.push_str(&format!("{:<12}", ""));
            for c in counts {
                out.push_str(&format!("{c:>6}"));
            }
            let total: usize = counts.iter().sum();
            out.push_str(&format!("{total:>8}{missing:>10}\n"));
        }
        out
    }
}

fn parse_label(raw: Option<String>, category: StageCategory) -> Result<Option<StageLabel>, String> {
    match raw {
        None => Ok(None),
        Some(s) if s.trim().is_empty() => Ok(None),
        Some(s) => StageLabel::parse_in(&s, category)
            .map(Some)
            .map_err(|_| format!("unknown {category} label {s:?}")),
    }
}

/// Parses JSONL corpus text. `source` names the input in error messages.
pub fn parse_corpus(text: &str, source: &str) -> Result<Corpus> {
    let mut reports = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::CorpusLine {
            path: source.to_string(),
            line: line_no,
            reason,
        };
        let rec: ReportLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let t = parse_label(rec.t_label, StageCategory::T).map_err(bad)?;
        let n = parse_label(rec.n_label, StageCategory::N).map_err(bad)?;
        let mut report = Report::new(rec.id, rec.text).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(report.id.clone()) {
            return Err(Error::DuplicateId(report.id));
        }
        if let Some(t) = t {
            report = report.with_gold(t);
        }
        if let Some(n) = n {
            report = report.with_gold(n);
        }
        reports.push(report);
    }
    Corpus::new(reports, source)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

/// Writes a corpus back out in the JSONL ingestion format.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in corpus.reports() {
        let line = ReportLine {
            id: r.id.clone(),
            text: r.text.clone(),
            t_label: r.gold(StageCategory::T).map(|l| l.to_string()),
            n_label: r.gold(StageCategory::N).map(|l| l.to_string()),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    crate::write_file(path.as_ref(), out.as_bytes())
}

/// A train/test partition of corpus ids. `train_ids` order is the induction order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl Split {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Split = serde_json::from_str(&text)?;
        let train: HashSet<&String> = split.train_ids.iter().collect();
        if split.test_ids.iter().any(|id| train.contains(id)) {
            return Err(Error::InvalidArgument(format!(
                "{}: train and test ids overlap",
                path.display()
            )));
        }
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        crate::write_file(path.as_ref(), s.as_bytes())
    }
}

/// Unbiased draw from `0..bound` by rejection sampling.
fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let r = rng.next_u64();
        if r >= threshold {
            return r % bound;
        }
    }
}

/// Fisher–Yates shuffle driven by a ChaCha8 stream seeded from `seed`.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Builds `n_splits` random train/test splits; split `i` is seeded with `base_seed + i`.
///
/// Ids are sorted before shuffling so the result does not depend on file order.
/// Test ids are returned in ascending id order.
pub fn make_splits(corpus: &Corpus, n_splits: usize, train_size: usize, base_seed: u64) -> Result<Vec<Split>> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("n_splits must be at least 1".into()));
    }
    if train_size == 0 || train_size >= corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "train_size {train_size} out of range 1..{}",
            corpus.len()
        )));
    }
    let mut sorted: Vec<String> = corpus.reports().iter().map(|r| r.id.clone()).collect();
    sorted.sort();
    (0..n_splits as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut ids = sorted.clone();
            seeded_shuffle(&mut ids, seed);
            let mut test_ids = ids.split_off(train_size);
            test_ids.sort();
            Ok(Split {
                seed,
                train_ids: ids,
                test_ids,
            })
        })
        .collect()
}

/// Keeps only the first `n` training ids.
pub fn truncate_train(split: &Split, n: usize) -> Result<Split> {
    if n == 0 || n > split.train_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "training count {n} out of range 1..={}",
            split.train_ids.len()
        )));
    }
    Ok(Split {
        seed: split.seed,
        train_ids: split.train_ids[..n].to_vec(),
        test_ids: split.test_ids.clone(),
    })
}
