//! The four staging workflows: zero-shot CoT, standard RAG, rule induction with
//! long-term memory (KEwLTM) and retrieval-derived rules (KEwRAG).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Report, StageCategory, StageLabel};
use crate::error::{Error, Result};
use crate::llm::{ChatRequest, LlmClient, StructuredOutput};
use crate::memory::{self, RuleMemory, UpdateTrace};
use crate::prompts::{TemplateId, TemplateRegistry};
use crate::retrieval::{join_context, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zscot,
    Rag,
    Kewltm,
    Kewrag,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zscot => "zscot",
            Method::Rag => "rag",
            Method::Kewltm => "kewltm",
            Method::Kewrag => "kewrag",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Kewltm | Method::Kewrag)
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Method::Rag | Method::Kewrag)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscot" => Ok(Method::Zscot),
            "rag" => Ok(Method::Rag),
            "kewltm" => Ok(Method::Kewltm),
            "kewrag" => Ok(Method::Kewrag),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

/// A predicted stage, or the marker for output that never satisfied the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicted {
    Label(StageLabel),
    Unparseable,
}

impl fmt::Display for Predicted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicted::Label(l) => l.fmt(f),
            Predicted::Unparseable => f.write_str("unparseable"),
        }
    }
}

impl Serialize for Predicted {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Predicted {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "unparseable" {
            Ok(Predicted::Unparseable)
        } else {
            s.parse().map(Predicted::Label).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub report_id: String,
    pub category: StageCategory,
    pub predicted: Predicted,
    pub reasoning: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_chunk_ids: Option<Vec<usize>>,
    pub timing_ms: u64,
    /// Split index for multi-split runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
}

impl PredictionRecord {
    pub fn new(
        report_id: impl Into<String>,
        category: StageCategory,
        predicted: Predicted,
        reasoning: impl Into<String>,
        method: Method,
    ) -> Self {
        PredictionRecord {
            report_id: report_id.into(),
            category,
            predicted,
            reasoning: reasoning.into(),
            method,
            memory_version: None,
            retrieved_chunk_ids: None,
            timing_ms: 0,
            split: None,
        }
    }

    /// Checks the method/field coupling: memory version iff a rule-based
    /// method, retrieved chunks iff a retrieval method.
    pub fn check(&self) -> Result<()> {
        if self.memory_version.is_some() != self.method.uses_memory() {
            return Err(Error::InvalidArgument(format!(
                "record {}: memory_version presence does not match method {}",
                self.report_id, self.method
            )));
        }
        if self.retrieved_chunk_ids.is_some() != self.method.uses_retrieval() {
            return Err(Error::InvalidArgument(format!(
                "record {}: retrieved_chunk_ids presence does not match method {}",
                self.report_id, self.method
            )));
        }
        if let Predicted::Label(l) = self.predicted {
            if l.category() != self.category {
                return Err(Error::InvalidArgument(format!(
                    "record {}: label {l} outside category {}",
                    self.report_id, self.category
                )));
            }
        }
        Ok(())
    }
}

pub fn records_to_jsonl(records: &[PredictionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<std::path::Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| Error::CorpusLine {
                path: path.display().to_string(),
                line: i + 1,
                reason,
            };
            let r: PredictionRecord = serde_json::from_str(l).map_err(|e| bad(e.to_string()))?;
            r.check().map_err(|e| bad(e.to_string()))?;
            Ok(r)
        })
        .collect()
}

/// Where per-record wall time comes from. Frozen clocks record zero so replayed
/// runs are byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    Frozen,
}

impl Clock {
    fn start(self) -> Option<Instant> {
        matches!(self, Clock::Wall).then(Instant::now)
    }

    fn elapsed_ms(start: Option<Instant>) -> u64 {
        start.map_or(0, |s| s.elapsed().as_millis() as u64)
    }
}

/// How standard RAG forms its retrieval query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RagQueryMode {
    /// One guideline query for the whole run.
    #[default]
    Guideline,
    /// Each report's own text is the query.
    ReportText,
}

impl FromStr for RagQueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guideline" => Ok(RagQueryMode::Guideline),
            "report-text" => Ok(RagQueryMode::ReportText),
            _ => Err(Error::InvalidArgument(format!("unknown rag query mode {s:?}"))),
        }
    }
}

/// Shared state for one category's runs.
pub struct Engine<'a> {
    pub llm: &'a LlmClient,
    pub templates: &'a TemplateRegistry,
    pub clock: Clock,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl<'a> Engine<'a> {
    pub fn new(llm: &'a LlmClient, templates: &'a TemplateRegistry) -> Self {
        Engine {
            llm,
            templates,
            clock: Clock::Wall,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn category(&self) -> StageCategory {
        self.templates.category()
    }

    fn request(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<ChatRequest> {
        let map: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        let mut req = self.templates.get(id).render(&map)?;
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        Ok(req)
    }

    /// Chat call where schema exhaustion is a per-record outcome, not a failure.
    fn chat_lenient(&self, req: &ChatRequest) -> Result<std::result::Result<StructuredOutput, String>> {
        match self.llm.chat(req) {
            Ok(out) => Ok(Ok(out)),
            Err(e @ Error::SchemaExhausted { .. }) => Ok(Err(e.to_string())),
            Err(e) => Err(e),
        }
    }

    /// Runs `per_report` over all reports with up to `max_in_flight` workers and
    /// returns records sorted by report id.
    fn for_each_report<F>(&self, reports: &[&Report], per_report: F) -> Result<Vec<PredictionRecord>>
    where
        F: Fn(&Report) -> Result<PredictionRecord> + Sync,
    {
        if reports.is_empty() {
            return Err(Error::Precondition("no reports to process".into()));
        }
        let workers = self.llm.max_in_flight().min(reports.len());
        let mut records = if workers <= 1 {
            reports.iter().map(|r| per_report(r)).collect::<Result<Vec<_>>>()?
        } else {
            let next = AtomicUsize::new(0);
            let results: Mutex<Vec<PredictionRecord>> = Mutex::new(Vec::with_capacity(reports.len()));
            let failure: Mutex<Option<Error>> = Mutex::new(None);
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        if failure.lock().unwrap().is_some() {
                            return;
                        }
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(report) = reports.get(i) else { return };
                        match per_report(report) {
                            Ok(rec) => results.lock().unwrap().push(rec),
                            Err(e) => {
                                failure.lock().unwrap().get_or_insert(e);
                                return;
                            }
                        }
                    });
                }
            });
            if let Some(e) = failure.into_inner().unwrap() {
                return Err(e);
            }
            results.into_inner().unwrap()
        };
        records.sort_by(|a, b| a.report_id.cmp(&b.report_id));
        Ok(records)
    }

    fn infer(
        &self,
        report: &Report,
        template: TemplateId,
        extra: &[(&str, &str)],
        method: Method,
    ) -> Result<PredictionRecord> {
        let start = self.clock.start();
        let mut bindings = vec![("report", report.text.as_str())];
        bindings.extend_from_slice(extra);
        let req = self.request(template, &bindings)?;
        let (predicted, reasoning) = match self.chat_lenient(&req)? {
            Ok(out) => (
                Predicted::Label(out.stage.expect("staging schema yields a stage")),
                out.reasoning.unwrap_or_default(),
            ),
            Err(reason) => (Predicted::Unparseable, reason),
        };
        let mut rec = PredictionRecord::new(report.id.clone(), self.category(), predicted, reasoning, method);
        rec.timing_ms = Clock::elapsed_ms(start);
        Ok(rec)
    }

    pub fn run_zscot(&self, reports: &[&Report]) -> Result<Vec<PredictionRecord>> {
        self.for_each_report(reports, |r| {
            self.infer(r, TemplateId::ZscotInference, &[], Method::Zscot)
        })
    }

    /// Standard RAG: retrieved chunks are bound into the prompt as raw context.
    pub fn run_rag(
        &self,
        reports: &[&Report],
        retriever: &Retriever,
        query: &str,
        k: usize,
        mode: RagQueryMode,
    ) -> Result<Vec<PredictionRecord>> {
        if retriever.index().is_empty() {
            return Err(Error::Config("standard RAG needs a non-empty chunk index".into()));
        }
        if reports.is_empty() {
            return Err(Error::Precondition("no reports to process".into()));
        }
        let shared = match mode {
            RagQueryMode::Guideline => {
                let hits = retriever.top_k(query, k)?;
                let ids: Vec<usize> = hits.iter().map(|h| h.chunk.chunk_id).collect();
                Some((join_context(&hits), ids))
            }
            RagQueryMode::ReportText => None,
        };
        self.for_each_report(reports, |r| {
            let (context, ids) = match &shared {
                Some(s) => s.clone(),
                None => {
                    let hits = retriever.top_k(&r.text, k)?;
                    (join_context(&hits), hits.iter().map(|h| h.chunk.chunk_id).collect())
                }
            };
            let mut rec = self.infer(r, TemplateId::RawragInference, &[("context", &context)], Method::Rag)?;
            rec.retrieved_chunk_ids = Some(ids);
            Ok(rec)
        })
    }

    /// Label-free memory induction over the first `n_train` training reports.
    ///
    /// While the memory is empty the elicitation template is used and its rules
    /// are accepted unconditionally; afterwards each report goes through the
    /// update template and the similarity gate. Steps whose output never
    /// satisfies the schema leave the memory untouched.
    pub fn induce_ltm(&self, train: &[&Report], threshold: f64, n_train: usize) -> Result<InductionResult> {
        memory::check_threshold(threshold)?;
        if n_train == 0 || n_train > train.len() {
            return Err(Error::Precondition(format!(
                "n_train {n_train} out of range 1..={}",
                train.len()
            )));
        }
        let mut mem = RuleMemory::empty(self.category());
        let mut traces = Vec::with_capacity(n_train);
        let mut aux = Vec::with_capacity(n_train);
        let mut history = Vec::with_capacity(n_train);
        for (i, report) in train[..n_train].iter().enumerate() {
            let step = i + 1;
            let start = self.clock.start();
            let rendered = mem.render_numbered();
            let req = if mem.is_empty() {
                self.request(TemplateId::LtmElicit, &[("report", &report.text)])?
            } else {
                self.request(
                    TemplateId::LtmUpdate,
                    &[("report", &report.text), ("memory", &rendered)],
                )?
            };
            let version_used = mem.version();
            let (predicted, reasoning) = match self.chat_lenient(&req)? {
                Ok(out) => {
                    let rules = out.rules.expect("rules schema yields rules");
                    let (next, trace) = memory::gated_update(&mem, rules, threshold, step)?;
                    mem = next;
                    traces.push(trace);
                    (
                        Predicted::Label(out.stage.expect("staging schema yields a stage")),
                        out.reasoning.unwrap_or_default(),
                    )
                }
                Err(reason) => {
                    log::warn!("induction step {step} ({}) skipped: {reason}", report.id);
                    traces.push(memory::skipped_step(&mem, step));
                    (Predicted::Unparseable, reason)
                }
            };
            let mut rec =
                PredictionRecord::new(report.id.clone(), self.category(), predicted, reasoning, Method::Kewltm);
            rec.memory_version = Some(version_used);
            rec.timing_ms = Clock::elapsed_ms(start);
            aux.push(rec);
            history.push(mem.clone());
        }
        Ok(InductionResult {
            final_memory: mem,
            n_consumed: traces.len(),
            traces,
            auxiliary_predictions: aux,
            history,
        })
    }

    pub fn run_kewltm_inference(&self, reports: &[&Report], memory: &RuleMemory) -> Result<Vec<PredictionRecord>> {
        self.check_rules(memory, "KEwLTM inference needs an induced memory")?;
        let rendered = memory.render_numbered();
        self.for_each_report(reports, |r| {
            let mut rec = self.infer(r, TemplateId::LtmInference, &[("memory", &rendered)], Method::Kewltm)?;
            rec.memory_version = Some(memory.version());
            Ok(rec)
        })
    }

    /// One retrieval pass and one elicitation call produce a frozen rule set.
    pub fn elicit_kewrag_rules(&self, retriever: &Retriever, query: &str, k: usize) -> Result<ElicitedRules> {
        let hits = retriever.top_k(query, k)?;
        let context = join_context(&hits);
        let req = self.request(TemplateId::RagElicit, &[("context", &context)])?;
        let out = self.llm.chat(&req)?;
        let rules = RuleMemory::new(self.category(), out.rules.unwrap_or_default(), 1)?;
        if rules.is_empty() {
            return Err(Error::InvalidMemory("elicitation produced no rules".into()));
        }
        Ok(ElicitedRules {
            rules,
            chunk_ids: hits.iter().map(|h| h.chunk.chunk_id).collect(),
        })
    }

    /// Applies a frozen rule set to every report; issues no retrieval calls.
    pub fn run_kewrag_inference(&self, reports: &[&Report], elicited: &ElicitedRules) -> Result<Vec<PredictionRecord>> {
        self.check_rules(&elicited.rules, "KEwRAG inference needs an elicited rule set")?;
        let rendered = elicited.rules.render_numbered();
        self.for_each_report(reports, |r| {
            let mut rec = self.infer(r, TemplateId::RagInference, &[("rules", &rendered)], Method::Kewrag)?;
            rec.memory_version = Some(elicited.rules.version());
            rec.retrieved_chunk_ids = Some(elicited.chunk_ids.clone());
            Ok(rec)
        })
    }

    fn check_rules(&self, rules: &RuleMemory, what: &str) -> Result<()> {
        if rules.is_empty() {
            return Err(Error::Precondition(what.to_string()));
        }
        if rules.category() != self.category() {
            return Err(Error::CategoryMismatch {
                expected: self.category(),
                found: rules.category(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InductionResult {
    pub final_memory: RuleMemory,
    pub traces: Vec<UpdateTrace>,
    pub n_consumed: usize,
    /// Stage predictions made while inducing; never evaluated.
    pub auxiliary_predictions: Vec<PredictionRecord>,
    /// Memory after each step, for training-count sweeps.
    pub history: Vec<RuleMemory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElicitedRules {
    pub rules: RuleMemory,
    pub chunk_ids: Vec<usize>,
}
