use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::corpus::{load_corpus, make_splits, Corpus, Report, StageCategory};
use crate::error::{Error, Result};
use crate::eval::{self, Aggregate, MacroMetrics};
use crate::llm::{
    ChatBackend, Embedder, EndpointConfig, LlmClient, OpenAiChat, OpenAiEmbedder, ScriptedBackend, TransportPolicy,
};
use crate::memory::{traces_to_csv, UpdateTrace};
use crate::pipelines::{records_to_jsonl, Clock, Engine, Method, PredictionRecord, RagQueryMode};
use crate::prompts::{default_templates, TemplateRegistry};
use crate::retrieval::{default_query, doc_hash, index_document, ChunkIndex, Retriever};
use crate::write_file;

/// Chat and embedding backends for a command.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Option<Arc<dyn Embedder>>,
    /// Replay backends zero all wall-clock fields so outputs are byte-stable.
    pub deterministic: bool,
}

impl Backends {
    pub fn scripted(backend: Arc<ScriptedBackend>) -> Self {
        Backends {
            chat: backend.clone(),
            embedder: Some(backend),
            deterministic: true,
        }
    }

    /// Script file when configured, otherwise the OpenAI-compatible endpoints
    /// named by the environment. The embedder is only set up when needed.
    pub fn from_config(cfg: &RunConfig, need_embedder: bool) -> Result<Self> {
        if let Some(path) = &cfg.script_path {
            return Ok(Backends::scripted(Arc::new(ScriptedBackend::from_file(path)?)));
        }
        let chat = OpenAiChat::new(
            EndpointConfig::from_env(&cfg.chat_model, false)?,
            TransportPolicy::default(),
        )
        .with_constrained_decoding(cfg.constrained_decoding)
        .with_max_in_flight(cfg.max_in_flight);
        let embedder: Option<Arc<dyn Embedder>> = if need_embedder {
            Some(Arc::new(OpenAiEmbedder::new(
                EndpointConfig::from_env(&cfg.embed_model, true)?,
                TransportPolicy::default(),
            )))
        } else {
            None
        };
        Ok(Backends {
            chat: Arc::new(chat),
            embedder,
            deterministic: false,
        })
    }

    fn embedder(&self) -> Result<&Arc<dyn Embedder>> {
        self.embedder
            .as_ref()
            .ok_or_else(|| Error::Config("no embedding backend configured".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub index: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Everything needed to attribute and rerun a command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub template_hashes: BTreeMap<String, String>,
    pub chat_model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_hash: Option<String>,
    pub splits: Vec<SplitInfo>,
    /// Seconds since the Unix epoch; 0 under a replay backend.
    pub started_unix: u64,
    pub assumptions: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, templates: &TemplateRegistry, backends: &Backends) -> Self {
        let started_unix = if backends.deterministic {
            0
        } else {
            SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
        };
        Manifest {
            status: RunStatus::Ok,
            error: None,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            template_hashes: templates.hashes(),
            chat_model_id: backends.chat.model_id(),
            embed_model_id: backends.embedder.as_ref().map(|e| e.model_id()),
            query: None,
            doc_hash: None,
            splits: Vec::new(),
            started_unix,
            assumptions: Vec::new(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_file(&dir.join("manifest.json"), s.as_bytes())
    }
}

/// Per-run metrics plus the cross-run aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub category: StageCategory,
    pub method: Method,
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
    /// Rendered as mean±std over runs (mean alone for a single run).
    pub display: BTreeMap<String, String>,
    pub num_errors: String,
    pub error_pct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<usize>,
    pub n_scored: usize,
    pub errors: u64,
    pub metrics: MacroMetrics,
}

fn scored_run(
    records: &[PredictionRecord],
    corpus: &Corpus,
    category: StageCategory,
    split: Option<usize>,
) -> Result<RunMetrics> {
    let scored: Vec<PredictionRecord> = records
        .iter()
        .filter(|r| corpus.get(&r.report_id).is_some_and(|rep| rep.gold(category).is_some()))
        .cloned()
        .collect();
    if scored.len() < records.len() {
        log::warn!(
            "{} of {} records have no {category} gold label and are not scored",
            records.len() - scored.len(),
            records.len()
        );
    }
    if scored.is_empty() {
        return Err(Error::Precondition(format!("no report has a {category} gold label")));
    }
    Ok(RunMetrics {
        split,
        n_scored: scored.len(),
        errors: eval::count_errors(&scored, corpus)?,
        metrics: eval::score(&scored, corpus, category)?.1,
    })
}

fn metrics_file(category: StageCategory, method: Method, runs: Vec<RunMetrics>) -> Result<MetricsFile> {
    let per_run: Vec<MacroMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let aggregate = eval::aggregate_runs(&per_run)?;
    let errors: u64 = runs.iter().map(|r| r.errors).sum();
    let evaluated: usize = runs.iter().map(|r| r.n_scored).sum();
    let num_errors = if runs.len() == 1 {
        errors.to_string()
    } else {
        eval::format_mean_count(u128::from(errors), runs.len() as u128)
    };
    let display = BTreeMap::from([
        ("precision".to_string(), aggregate.precision.to_string()),
        ("recall".to_string(), aggregate.recall.to_string()),
        ("f1".to_string(), aggregate.f1.to_string()),
    ]);
    Ok(MetricsFile {
        category,
        method,
        runs,
        aggregate,
        display,
        num_errors,
        error_pct: eval::format_percent(u128::from(errors), evaluated as u128),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn templates_for(cfg: &RunConfig, category: StageCategory) -> Result<TemplateRegistry> {
    let reg = default_templates(category);
    match &cfg.templates_dir {
        Some(dir) => reg.with_overrides(dir),
        None => Ok(reg),
    }
}

fn client_for(cfg: &RunConfig, backends: &Backends) -> LlmClient {
    LlmClient::new(backends.chat.clone()).with_retries(cfg.schema_retries)
}

fn engine<'a>(cfg: &RunConfig, llm: &'a LlmClient, templates: &'a TemplateRegistry, backends: &Backends) -> Engine<'a> {
    let mut e = Engine::new(llm, templates).with_clock(if backends.deterministic {
        Clock::Frozen
    } else {
        Clock::Wall
    });
    e.temperature = cfg.temperature;
    e.max_tokens = cfg.max_tokens;
    e
}

/// Loads the configured index (checking it matches the guideline and embedder)
/// or builds one from the guideline document.
fn retriever_for(cfg: &RunConfig, backends: &Backends, manifest: &mut Manifest) -> Result<Retriever> {
    let path = cfg.guideline_path()?;
    let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let embedder = backends.embedder()?.clone();
    let hash = doc_hash(&doc);
    let index = match &cfg.index_path {
        Some(p) => {
            let index = ChunkIndex::load(p)?;
            if index.doc_hash != hash {
                return Err(Error::Mismatch(format!(
                    "index {} was built from a different guideline document",
                    p.display()
                )));
            }
            if index.model_id != embedder.model_id() {
                return Err(Error::Mismatch(format!(
                    "index {} was embedded with {}, not {}",
                    p.display(),
                    index.model_id,
                    embedder.model_id()
                )));
            }
            index
        }
        None => index_document(&doc, cfg.chunk_max_chars, cfg.chunk_overlap, embedder.as_ref())?,
    };
    manifest.doc_hash = Some(hash);
    Ok(Retriever::new(Arc::new(index), embedder))
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<String> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    Ok(format!("{} reports\n{}", corpus.len(), corpus.distribution_table()))
}

/// Builds and saves a chunk index; returns a short summary line.
pub fn cmd_index(cfg: &RunConfig, out: &Path, backends: &Backends) -> Result<String> {
    let path = cfg.guideline_path()?;
    let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index = index_document(
        &doc,
        cfg.chunk_max_chars,
        cfg.chunk_overlap,
        backends.embedder()?.as_ref(),
    )?;
    index.save(out)?;
    Ok(format!(
        "{} chunks, dimension {}, doc_hash {}\n",
        index.len(),
        index.dim,
        index.doc_hash
    ))
}

/// Outcome of a successful `run`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<PredictionRecord>,
    pub metrics: MetricsFile,
    pub manifest: Manifest,
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let method = cfg.method()?;
    cfg.category()?;
    cfg.check_for_method(method)?;
    let backends = Backends::from_config(cfg, method.uses_retrieval())?;
    cmd_run_with(cfg, &backends)
}

/// Runs the configured method; on failure a FAILED manifest is still written.
pub fn cmd_run_with(cfg: &RunConfig, backends: &Backends) -> Result<RunOutcome> {
    let method = cfg.method()?;
    let category = cfg.category()?;
    cfg.check_for_method(method)?;
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let templates = templates_for(cfg, category)?;
    let mut manifest = Manifest::new("run", cfg, &templates, backends);
    if backends.deterministic {
        manifest
            .assumptions
            .push("replay backend: timings and start time recorded as zero".into());
    }
    let out = cfg.output_dir.clone();
    let result = execute_run(cfg, method, category, &corpus, &templates, backends, &mut manifest);
    match result {
        Ok((records, metrics)) => {
            manifest.save(&out)?;
            Ok(RunOutcome {
                records,
                metrics,
                manifest,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            if let Err(save_err) = manifest.save(&out) {
                log::error!("could not write failure manifest: {save_err}");
            }
            Err(e)
        }
    }
}

fn query_for(category: StageCategory, manifest: &mut Manifest) -> String {
    let q = default_query(category);
    if category == StageCategory::N {
        manifest
            .assumptions
            .push("N-stage retrieval query is the T-stage query with the category swapped".into());
    }
    manifest.query = Some(q.clone());
    q
}

fn execute_run(
    cfg: &RunConfig,
    method: Method,
    category: StageCategory,
    corpus: &Corpus,
    templates: &TemplateRegistry,
    backends: &Backends,
    manifest: &mut Manifest,
) -> Result<(Vec<PredictionRecord>, MetricsFile)> {
    let out = &cfg.output_dir;
    let llm = client_for(cfg, backends);
    let engine = engine(cfg, &llm, templates, backends);
    let all: Vec<&Report> = corpus.reports().iter().collect();

    let (records, runs) = match method {
        Method::Zscot | Method::Rag | Method::Kewrag => {
            let records = match method {
                Method::Zscot => engine.run_zscot(&all)?,
                Method::Rag => {
                    let retriever = retriever_for(cfg, backends, manifest)?;
                    let query = query_for(category, manifest);
                    if cfg.rag_query_mode == RagQueryMode::Guideline {
                        manifest
                            .assumptions
                            .push("standard RAG retrieves once per run with the guideline query".into());
                    } else {
                        manifest.query = None;
                        manifest
                            .assumptions
                            .push("standard RAG retrieves per report with the report text as query".into());
                    }
                    engine.run_rag(&all, &retriever, &query, cfg.k, cfg.rag_query_mode)?
                }
                _ => {
                    let retriever = retriever_for(cfg, backends, manifest)?;
                    let query = query_for(category, manifest);
                    let elicited = engine.elicit_kewrag_rules(&retriever, &query, cfg.k)?;
                    elicited.rules.save(out.join("rules.json"))?;
                    engine.run_kewrag_inference(&all, &elicited)?
                }
            };
            write_file(&out.join("predictions.jsonl"), records_to_jsonl(&records)?.as_bytes())?;
            let run = scored_run(&records, corpus, category, None)?;
            (records, vec![run])
        }
        Method::Kewltm => {
            let splits = make_splits(corpus, cfg.n_splits, cfg.train_size, cfg.base_seed)?;
            let mut records = Vec::new();
            let mut runs = Vec::new();
            let mut traces: Vec<Vec<UpdateTrace>> = Vec::new();
            for (i, split) in splits.iter().enumerate() {
                manifest.splits.push(SplitInfo {
                    index: i,
                    seed: split.seed,
                    n_train: cfg.n_train,
                    n_test: split.test_ids.len(),
                });
                let train = corpus.select(&split.train_ids)?;
                let induced = engine.induce_ltm(&train, cfg.threshold, cfg.n_train)?;
                induced.final_memory.save(out.join(format!("memory_split{i}.json")))?;
                write_file(
                    &out.join(format!("trace_split{i}.csv")),
                    traces_to_csv(&induced.traces).as_bytes(),
                )?;
                let test = corpus.select(&split.test_ids)?;
                let mut split_records = engine.run_kewltm_inference(&test, &induced.final_memory)?;
                for r in &mut split_records {
                    r.split = Some(i);
                }
                runs.push(scored_run(&split_records, corpus, category, Some(i))?);
                records.extend(split_records);
                traces.push(induced.traces);
                // flush after every split so a later failure leaves usable output
                write_file(&out.join("predictions.jsonl"), records_to_jsonl(&records)?.as_bytes())?;
            }
            let curve = eval::memory_curve(&traces)?;
            write_file(&out.join("curves.csv"), eval::curve_to_csv(&curve).as_bytes())?;
            (records, runs)
        }
    };
    let metrics = metrics_file(category, method, runs)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok((records, metrics))
}

/// The parameter varied by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    TrainCounts(Vec<usize>),
    Thresholds(Vec<f64>),
}

pub const SWEEP_CSV_HEADER: &str = "split,train_count,threshold,precision,recall,f1,memory_len,memory_version";

pub fn cmd_sweep(cfg: &RunConfig, sweep: &Sweep) -> Result<String> {
    if cfg.method.is_some_and(|m| m != Method::Kewltm) {
        return Err(Error::Config("sweeps apply to method kewltm only".into()));
    }
    cfg.category()?;
    let backends = Backends::from_config(cfg, false)?;
    cmd_sweep_with(cfg, sweep, &backends)
}

/// Reruns induction and inference across the swept parameter and writes
/// `sweep.csv` (per-point macro metrics) and `curves.csv` (mean memory length
/// per step, one series per threshold).
pub fn cmd_sweep_with(cfg: &RunConfig, sweep: &Sweep, backends: &Backends) -> Result<String> {
    let category = cfg.category()?;
    let mut cfg = cfg.clone();
    cfg.method = Some(Method::Kewltm);
    let (counts, thresholds) = match sweep {
        Sweep::TrainCounts(c) => (c.clone(), vec![cfg.threshold]),
        Sweep::Thresholds(t) => (vec![cfg.n_train], t.clone()),
    };
    if counts.is_empty() || thresholds.is_empty() {
        return Err(Error::Config("a sweep needs at least one point".into()));
    }
    let max_count = *counts.iter().max().unwrap();
    if counts.contains(&0) || max_count > cfg.train_size {
        return Err(Error::Config(format!(
            "training counts must lie in 1..={}",
            cfg.train_size
        )));
    }
    for &t in &thresholds {
        crate::memory::check_threshold(t).map_err(|e| Error::Config(e.to_string()))?;
    }
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let templates = templates_for(&cfg, category)?;
    let mut manifest = Manifest::new("sweep", &cfg, &templates, backends);
    let result = execute_sweep(
        &cfg,
        category,
        &corpus,
        &templates,
        backends,
        &counts,
        &thresholds,
        &mut manifest,
    );
    match result {
        Ok(summary) => {
            manifest.save(&cfg.output_dir)?;
            Ok(summary)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            if let Err(save_err) = manifest.save(&cfg.output_dir) {
                log::error!("could not write failure manifest: {save_err}");
            }
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn execute_sweep(
    cfg: &RunConfig,
    category: StageCategory,
    corpus: &Corpus,
    templates: &TemplateRegistry,
    backends: &Backends,
    counts: &[usize],
    thresholds: &[f64],
    manifest: &mut Manifest,
) -> Result<String> {
    let llm = client_for(cfg, backends);
    let engine = engine(cfg, &llm, templates, backends);
    let splits = make_splits(corpus, cfg.n_splits, cfg.train_size, cfg.base_seed)?;
    let max_count = *counts.iter().max().unwrap();
    let mut rows = String::from(SWEEP_CSV_HEADER);
    rows.push('\n');
    let mut curves = String::from("threshold,step,mean_len\n");
    for &threshold in thresholds {
        let mut traces = Vec::new();
        for (i, split) in splits.iter().enumerate() {
            if manifest.splits.len() <= i {
                manifest.splits.push(SplitInfo {
                    index: i,
                    seed: split.seed,
                    n_train: max_count,
                    n_test: split.test_ids.len(),
                });
            }
            let train = corpus.select(&split.train_ids)?;
            let test = corpus.select(&split.test_ids)?;
            let induced = engine.induce_ltm(&train, threshold, max_count)?;
            for &count in counts {
                let memory = &induced.history[count - 1];
                let records = engine.run_kewltm_inference(&test, memory)?;
                let m = scored_run(&records, corpus, category, Some(i))?.metrics;
                writeln!(
                    rows,
                    "{i},{count},{threshold},{:.6},{:.6},{:.6},{},{}",
                    m.precision,
                    m.recall,
                    m.f1,
                    memory.serialize().chars().count(),
                    memory.version()
                )
                .unwrap();
            }
            traces.push(induced.traces);
        }
        for (step, len) in eval::memory_curve(&traces)? {
            writeln!(curves, "{threshold},{step},{len:.2}").unwrap();
        }
    }
    let out = &cfg.output_dir;
    write_file(&out.join("sweep.csv"), rows.as_bytes())?;
    write_file(&out.join("curves.csv"), curves.as_bytes())?;
    Ok(rows)
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Scores prediction files, prints error rows, unique-error comparisons for two
/// files, and annotation tallies.
pub fn cmd_evaluate(cfg: &RunConfig, predictions: &[PathBuf], annotations: Option<&Path>) -> Result<String> {
    let mut out = String::new();
    if predictions.len() > 2 {
        return Err(Error::Config("evaluate compares at most two prediction files".into()));
    }
    if !predictions.is_empty() {
        let corpus = load_corpus(cfg.corpus_path()?)?;
        let mut first_runs: Vec<Vec<PredictionRecord>> = Vec::new();
        let mut table_input: BTreeMap<String, Vec<Vec<PredictionRecord>>> = BTreeMap::new();
        for path in predictions {
            let records = crate::pipelines::load_predictions(path)?;
            let Some(first) = records.first() else {
                return Err(Error::InvalidArgument(format!("{} has no records", path.display())));
            };
            let category = cfg.category.unwrap_or(first.category);
            let method = first.method;
            if let Some(r) = records.iter().find(|r| r.method != method) {
                return Err(Error::Mismatch(format!(
                    "{} mixes methods {method} and {}",
                    path.display(),
                    r.method
                )));
            }
            let mut by_split: BTreeMap<Option<usize>, Vec<PredictionRecord>> = BTreeMap::new();
            for r in records {
                by_split.entry(r.split).or_default().push(r);
            }
            let mut per_run = Vec::new();
            for run in by_split.values() {
                per_run.push(eval::score(run, &corpus, category)?.1);
            }
            let agg = eval::aggregate_runs(&per_run)?;
            writeln!(
                out,
                "== {} ({method}, {category}, {} run(s))",
                file_label(path),
                per_run.len()
            )
            .unwrap();
            if per_run.len() == 1 {
                out.push_str(&eval::render_metrics(&per_run[0]));
            } else {
                writeln!(
                    out,
                    "macro precision {}  recall {}  f1 {}",
                    agg.precision, agg.recall, agg.f1
                )
                .unwrap();
            }
            let runs: Vec<Vec<PredictionRecord>> = by_split.into_values().collect();
            first_runs.push(runs[0].clone());
            table_input.insert(format!("{} ({method})", file_label(path)), runs);
        }
        writeln!(
            out,
            "\n{:<32}{:>6}{:>12}{:>10}",
            "predictions", "total", "errors", "error%"
        )
        .unwrap();
        for row in eval::error_table(&table_input, &corpus)? {
            writeln!(
                out,
                "{:<32}{:>6}{:>12}{:>10}",
                row.method, row.total, row.num_errors, row.error_pct
            )
            .unwrap();
        }
        if let [a, b] = &first_runs[..] {
            let (only_a, only_b) = eval::compare_unique_errors(a, b, &corpus)?;
            writeln!(
                out,
                "\nwrong only in {}: {}",
                file_label(&predictions[0]),
                only_a.join(" ")
            )
            .unwrap();
            writeln!(
                out,
                "wrong only in {}: {}",
                file_label(&predictions[1]),
                only_b.join(" ")
            )
            .unwrap();
        }
    }
    if let Some(path) = annotations {
        let notes = eval::load_annotations(path)?;
        let mut groups: BTreeMap<(Method, StageCategory), Vec<eval::ErrorAnnotation>> = BTreeMap::new();
        for a in notes {
            groups.entry((a.method, a.category)).or_default().push(a);
        }
        writeln!(out, "\nerror causes ({})", file_label(path)).unwrap();
        for ((method, category), group) in &groups {
            let tally = eval::tally_annotations(group);
            let causes: Vec<String> = eval::ErrorCause::ALL
                .iter()
                .map(|c| format!("{c:?}={}", tally.get(*c)))
                .collect();
            writeln!(out, "{method} {category}: total={} {}", tally.total, causes.join(" ")).unwrap();
        }
    }
    if out.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: pass --predictions and/or --annotations".into(),
        ));
    }
    Ok(out)
}
