//! Scoring: confusion matrices, per-class and macro precision/recall/F1, error
//! tables, multi-run aggregation, error-cause tallies and memory-length curves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, StageCategory, StageLabel};
use crate::error::{Error, Result};
use crate::memory::UpdateTrace;
use crate::pipelines::{Method, Predicted, PredictionRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub category: StageCategory,
    /// `counts[gold][predicted]`, indexed by label position within the category.
    pub counts: [[u64; 4]; 4],
    /// Unparseable predictions per gold label.
    pub unparseable: [u64; 4],
}

impl ConfusionMatrix {
    pub fn new(category: StageCategory) -> Self {
        ConfusionMatrix {
            category,
            counts: [[0; 4]; 4],
            unparseable: [0; 4],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparseable.iter().sum::<u64>()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..4).filter(|&g| g != c).map(|g| self.counts[g][c]).sum()
    }

    /// Every gold-`c` record not predicted `c`, unparseable ones included.
    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() + self.unparseable[c] - self.counts[c][c]
    }

    pub fn errors(&self) -> u64 {
        self.total() - (0..4).map(|c| self.counts[c][c]).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: StageLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl MacroMetrics {
    pub fn from_matrix(m: &ConfusionMatrix) -> Self {
        let per_class: Vec<ClassMetrics> = m
            .category
            .labels()
            .into_iter()
            .enumerate()
            .map(|(c, label)| {
                let tp = m.true_positives(c);
                let precision = ratio(tp, tp + m.false_positives(c));
                let recall = ratio(tp, tp + m.false_negatives(c));
                ClassMetrics {
                    label,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / 4.0;
        MacroMetrics {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
            per_class,
        }
    }
}

fn gold_of(corpus: &Corpus, id: &str, category: StageCategory) -> Result<StageLabel> {
    let report = corpus.get(id).ok_or_else(|| Error::UnknownReport(id.to_string()))?;
    report.gold(category).ok_or_else(|| Error::MissingGold {
        id: id.to_string(),
        category,
    })
}

fn check_category(r: &PredictionRecord, category: StageCategory) -> Result<()> {
    if r.category != category {
        return Err(Error::CategoryMismatch {
            expected: category,
            found: r.category,
        });
    }
    Ok(())
}

/// Builds the confusion matrix for `records` against the corpus gold labels.
pub fn confusion(records: &[PredictionRecord], corpus: &Corpus, category: StageCategory) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(category);
    for r in records {
        check_category(r, category)?;
        let gold = gold_of(corpus, &r.report_id, category)?.index();
        match r.predicted {
            Predicted::Label(p) => m.counts[gold][p.index()] += 1,
            Predicted::Unparseable => m.unparseable[gold] += 1,
        }
    }
    Ok(m)
}

pub fn score(
    records: &[PredictionRecord],
    corpus: &Corpus,
    category: StageCategory,
) -> Result<(ConfusionMatrix, MacroMetrics)> {
    let m = confusion(records, corpus, category)?;
    let metrics = MacroMetrics::from_matrix(&m);
    Ok((m, metrics))
}

/// True when the record's prediction differs from its gold label.
pub fn is_error(r: &PredictionRecord, corpus: &Corpus) -> Result<bool> {
    let gold = gold_of(corpus, &r.report_id, r.category)?;
    Ok(r.predicted != Predicted::Label(gold))
}

pub fn count_errors(records: &[PredictionRecord], corpus: &Corpus) -> Result<u64> {
    let mut n = 0;
    for r in records {
        n += u64::from(is_error(r, corpus)?);
    }
    Ok(n)
}

/// `100 * num / den` rounded half away from zero to one decimal, with a `%` sign.
pub fn format_percent(num: u128, den: u128) -> String {
    assert!(den > 0, "percentage of an empty set");
    let tenths = (2000 * num + den) / (2 * den);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// Error percentage for an error count (possibly a run mean with two decimals) out of `total`.
pub fn error_percentage(errors: f64, total: usize) -> String {
    let hundredths = (errors * 100.0).round() as u128;
    format_percent(hundredths, total as u128 * 100)
}

/// `num / den` to two decimals, ties to even.
pub fn format_mean_count(num: u128, den: u128) -> String {
    assert!(den > 0);
    let scaled = 100 * num;
    let (q, r) = (scaled / den, scaled % den);
    let q = match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q % 2 == 1 => q + 1,
        _ => q,
    };
    format!("{}.{:02}", q / 100, q % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub method: String,
    pub runs: usize,
    pub total: u64,
    pub num_errors: String,
    pub error_pct: String,
}

/// One row per method. Single-run methods report an integer count; multi-run
/// methods report the mean count over runs (two decimals). The percentage is
/// total errors over total evaluated records.
pub fn error_table(
    record_sets: &BTreeMap<String, Vec<Vec<PredictionRecord>>>,
    corpus: &Corpus,
) -> Result<Vec<ErrorRow>> {
    let mut category = None;
    let mut rows = Vec::new();
    for (method, runs) in record_sets {
        if runs.is_empty() {
            return Err(Error::InvalidArgument(format!("method {method} has no runs")));
        }
        let mut errors = 0u64;
        let mut evaluated = 0u64;
        for run in runs {
            for r in run {
                match category {
                    None => category = Some(r.category),
                    Some(c) if c != r.category => {
                        return Err(Error::Mismatch(format!(
                            "method {method} mixes categories {c} and {}",
                            r.category
                        )))
                    }
                    _ => {}
                }
            }
            errors += count_errors(run, corpus)?;
            evaluated += run.len() as u64;
        }
        if evaluated == 0 {
            return Err(Error::InvalidArgument(format!("method {method} has no records")));
        }
        let n = runs.len() as u128;
        rows.push(ErrorRow {
            method: method.clone(),
            runs: runs.len(),
            total: evaluated / runs.len() as u64,
            num_errors: if runs.len() == 1 {
                errors.to_string()
            } else {
                format_mean_count(errors as u128, n)
            },
            error_pct: format_percent(errors as u128, evaluated as u128),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.3}±{:.3}", self.mean, s),
            None => write!(f, "{:.3}", self.mean),
        }
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Ok(Summary { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
}

pub fn aggregate_runs(per_run: &[MacroMetrics]) -> Result<Aggregate> {
    let pick = |f: fn(&MacroMetrics) -> f64| summarize(&per_run.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        runs: per_run.len(),
        precision: pick(|m| m.precision)?,
        recall: pick(|m| m.recall)?,
        f1: pick(|m| m.f1)?,
    })
}

/// Ids wrong in `a` but right in `b`, and vice versa, each sorted.
pub fn compare_unique_errors(
    a: &[PredictionRecord],
    b: &[PredictionRecord],
    corpus: &Corpus,
) -> Result<(Vec<String>, Vec<String>)> {
    let index = |rs: &[PredictionRecord]| -> Result<HashMap<String, bool>> {
        rs.iter()
            .map(|r| Ok((r.report_id.clone(), is_error(r, corpus)?)))
            .collect()
    };
    let (ea, eb) = (index(a)?, index(b)?);
    let ids_a: BTreeSet<&String> = ea.keys().collect();
    let ids_b: BTreeSet<&String> = eb.keys().collect();
    if ids_a != ids_b {
        let diff = ids_a.symmetric_difference(&ids_b).next().unwrap();
        return Err(Error::Mismatch(format!("report {diff:?} is scored by only one method")));
    }
    let only = |x: &HashMap<String, bool>, y: &HashMap<String, bool>| {
        let mut ids: Vec<String> = x
            .iter()
            .filter(|(id, &wrong)| wrong && !y[*id])
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    };
    Ok((only(&ea, &eb), only(&eb, &ea)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCause {
    /// Incorrect information extraction.
    IIE,
    /// Incorrect inference.
    Inf,
    /// Numerical incompetence.
    NI,
    /// Incorrect knowledge.
    IK,
    /// Conflicting ground truth.
    CGT,
    /// Incomplete information.
    IncInf,
}

impl ErrorCause {
    pub const ALL: [ErrorCause; 6] = [
        ErrorCause::IIE,
        ErrorCause::Inf,
        ErrorCause::NI,
        ErrorCause::IK,
        ErrorCause::CGT,
        ErrorCause::IncInf,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub report_id: String,
    pub method: Method,
    pub category: StageCategory,
    pub cause: ErrorCause,
    #[serde(default)]
    pub note: String,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<ErrorAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorpusLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseTally {
    pub counts: BTreeMap<ErrorCause, usize>,
    pub total: usize,
}

impl CauseTally {
    pub fn get(&self, cause: ErrorCause) -> usize {
        self.counts[&cause]
    }
}

pub fn tally_annotations(annotations: &[ErrorAnnotation]) -> CauseTally {
    let mut counts: BTreeMap<ErrorCause, usize> = ErrorCause::ALL.iter().map(|&c| (c, 0)).collect();
    for a in annotations {
        *counts.get_mut(&a.cause).unwrap() += 1;
    }
    CauseTally {
        counts,
        total: annotations.len(),
    }
}

/// Mean accepted-memory length per induction step across runs. Shorter runs
/// carry their last length forward.
pub fn memory_curve(runs: &[Vec<UpdateTrace>]) -> Result<Vec<(usize, f64)>> {
    if runs.is_empty() || runs.iter().all(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("no traces to summarize".into()));
    }
    let steps = runs.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..steps)
        .map(|s| {
            let sum: usize = runs
                .iter()
                .map(|r| r.get(s).or(r.last()).map_or(0, |t| t.current_len))
                .sum();
            (s + 1, sum as f64 / runs.len() as f64)
        })
        .collect())
}

pub fn curve_to_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,mean_len\n");
    for (step, len) in curve {
        out.push_str(&format!("{step},{len:.2}\n"));
    }
    out
}

/// Plain-text per-class and macro metrics table.
pub fn render_metrics(m: &MacroMetrics) -> String {
    let mut out = format!("{:<8}{:>10}{:>10}{:>10}\n", "label", "precision", "recall", "f1");
    for c in &m.per_class {
        out.push_str(&format!(
            "{:<8}{:>10.3}{:>10.3}{:>10.3}\n",
            c.label.to_string(),
            c.precision,
            c.recall,
            c.f1
        ));
    }
    out.push_str(&format!(
        "{:<8}{:>10.3}{:>10.3}{:>10.3}\n",
        "macro", m.precision, m.recall, m.f1
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Report;

    fn label(s: &str) -> StageLabel {
        s.parse().unwrap()
    }

    fn setup(gold: &[&str], pred: &[Option<&str>]) -> (Corpus, Vec<PredictionRecord>) {
        let reports = gold
            .iter()
            .enumerate()
            .map(|(i, g)| Report::new(format!("r{i}"), "text").unwrap().with_gold(label(g)))
            .collect();
        let corpus = Corpus::new(reports, "t").unwrap();
        let category = label(gold[0]).category();
        let records = pred
            .iter()
            .enumerate()
            .map(|(i, p)| {
                PredictionRecord::new(
                    format!("r{i}"),
                    category,
                    p.map_or(Predicted::Unparseable, |s| Predicted::Label(label(s))),
                    "why",
                    Method::Zscot,
                )
            })
            .collect();
        (corpus, records)
    }

    #[test]
    fn perfect_classifier() {
        let (c, r) = setup(
            &["T1", "T2", "T3", "T4"],
            &[Some("T1"), Some("T2"), Some("T3"), Some("T4")],
        );
        let (_, m) = score(&r, &c, StageCategory::T).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn toy_matrix_hand_computed() {
        let (c, r) = setup(
            &["T1", "T1", "T2", "T2"],
            &[Some("T1"), Some("T2"), Some("T2"), Some("T2")],
        );
        let (m, mm) = score(&r, &c, StageCategory::T).unwrap();
        assert_eq!(m.total(), 4);
        let t1 = &mm.per_class[0];
        let t2 = &mm.per_class[1];
        assert_eq!((t1.precision, t1.recall), (1.0, 0.5));
        assert!((t1.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((t2.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(t2.recall, 1.0);
        assert!((t2.f1 - 0.8).abs() < 1e-12);
        assert_eq!(mm.per_class[2].f1, 0.0);
        assert_eq!(mm.per_class[3].f1, 0.0);
        assert!((mm.f1 - (2.0 / 3.0 + 0.8) / 4.0).abs() < 1e-12);
        assert_eq!(format!("{:.4}", mm.f1), "0.3667");
    }

    #[test]
    fn unparseable_counts_as_false_negative_only() {
        let (c, r) = setup(&["N0", "N0", "N1"], &[None, Some("N0"), Some("N1")]);
        let (m, mm) = score(&r, &c, StageCategory::N).unwrap();
        assert_eq!(m.unparseable, [1, 0, 0, 0]);
        assert_eq!(m.total(), 3);
        assert_eq!(m.errors(), 1);
        assert_eq!(mm.per_class[0].precision, 1.0);
        assert_eq!(mm.per_class[0].recall, 0.5);
    }

    #[test]
    fn score_errors() {
        let (c, mut r) = setup(&["T1"], &[Some("T1")]);
        r[0].report_id = "nope".into();
        assert!(matches!(score(&r, &c, StageCategory::T), Err(Error::UnknownReport(id)) if id == "nope"));
        let (c, r) = setup(&["T1"], &[Some("T1")]);
        assert!(score(&r, &c, StageCategory::N).is_err());
        let c2 = Corpus::new(vec![Report::new("r0", "x").unwrap()], "t").unwrap();
        assert!(matches!(
            score(&r, &c2, StageCategory::T),
            Err(Error::MissingGold { .. })
        ));
    }

    #[test]
    fn percentages() {
        assert_eq!(format_percent(110, 800), "13.8%");
        assert_eq!(format_percent(132, 800), "16.5%");
        assert_eq!(format_percent(0, 700), "0.0%");
        assert_eq!(format_percent(122, 800), "15.3%");
        assert_eq!(error_percentage(85.50, 700), "12.2%");
        assert_eq!(format_mean_count(684, 8), "85.50");
        assert_eq!(format_mean_count(657, 8), "82.12");
        assert_eq!(format_mean_count(659, 8), "82.38");
        assert_eq!(format_mean_count(1, 3), "0.33");
        assert_eq!(format_mean_count(2, 3), "0.67");
    }

    #[test]
    fn error_table_rows() {
        let (c, r) = setup(&["T1", "T1", "T2", "T2"], &[Some("T1"), Some("T2"), Some("T2"), None]);
        let mut sets = BTreeMap::new();
        sets.insert("zscot".to_string(), vec![r.clone()]);
        sets.insert("kewltm".to_string(), vec![r.clone(), r[..2].to_vec()]);
        let rows = error_table(&sets, &c).unwrap();
        let k = rows.iter().find(|r| r.method == "kewltm").unwrap();
        assert_eq!((k.num_errors.as_str(), k.error_pct.as_str()), ("1.50", "50.0%"));
        let z = rows.iter().find(|r| r.method == "zscot").unwrap();
        assert_eq!(
            (z.num_errors.as_str(), z.error_pct.as_str(), z.total),
            ("2", "50.0%", 4)
        );
    }

    #[test]
    fn aggregation_rendering() {
        assert_eq!(summarize(&[0.8, 0.8, 0.8]).unwrap().to_string(), "0.800±0.000");
        assert_eq!(summarize(&[0.1, 0.2, 0.3, 0.4]).unwrap().to_string(), "0.250±0.129");
        assert_eq!(summarize(&[0.822]).unwrap().to_string(), "0.822");
        assert!(summarize(&[]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn unique_errors() {
        let (c, a) = setup(
            &["T1", "T1", "T1", "T1"],
            &[Some("T1"), Some("T2"), Some("T2"), Some("T1")],
        );
        let (_, b) = setup(
            &["T1", "T1", "T1", "T1"],
            &[Some("T1"), Some("T1"), Some("T2"), Some("T3")],
        );
        let (ao, bo) = compare_unique_errors(&a, &b, &c).unwrap();
        assert_eq!(ao, ["r1"]);
        assert_eq!(bo, ["r3"]);
        let (x, y) = compare_unique_errors(&a, &a, &c).unwrap();
        assert!(x.is_empty() && y.is_empty());
        assert!(compare_unique_errors(&a, &b[..3], &c).is_err());
    }

    #[test]
    fn tallies() {
        let t = tally_annotations(&[]);
        assert_eq!(t.total, 0);
        assert!(ErrorCause::ALL.iter().all(|&c| t.get(c) == 0));
        let one = ErrorAnnotation {
            report_id: "r".into(),
            method: Method::Kewltm,
            category: StageCategory::T,
            cause: ErrorCause::NI,
            note: String::new(),
        };
        let t = tally_annotations(std::slice::from_ref(&one));
        assert_eq!((t.get(ErrorCause::NI), t.total), (1, 1));
        let line = serde_json::to_string(&one).unwrap();
        assert_eq!(
            line,
            r#"{"report_id":"r","method":"kewltm","category":"T","cause":"NI","note":""}"#
        );
    }

    fn trace(lens: &[usize]) -> Vec<UpdateTrace> {
        lens.iter()
            .enumerate()
            .map(|(i, &l)| UpdateTrace {
                step: i + 1,
                proposed_len: l,
                current_len: l,
                similarity: 100.0,
                accepted: true,
                distance: 0,
            })
            .collect()
    }

    #[test]
    fn curves() {
        assert_eq!(
            memory_curve(&[trace(&[10, 10, 25])]).unwrap(),
            [(1, 10.0), (2, 10.0), (3, 25.0)]
        );
        assert_eq!(
            memory_curve(&[trace(&[10, 20]), trace(&[30, 40])]).unwrap(),
            [(1, 20.0), (2, 30.0)]
        );
        assert_eq!(
            memory_curve(&[trace(&[10, 20, 30]), trace(&[30])]).unwrap()[2],
            (3, 30.0)
        );
        assert!(memory_curve(&[]).is_err());
        assert_eq!(curve_to_csv(&[(1, 20.0)]), "step,mean_len\n1,20.00\n");
    }
}
