//! Command-line surface: `ingest`, `index`, `run`, `sweep` and `evaluate`.
//!
//! Settings resolve as flags, then `STAGEPIPE_*` environment variables, then
//! the JSON file given by `--config`, then built-in defaults.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

pub use commands::{
    cmd_evaluate, cmd_index, cmd_ingest, cmd_run, cmd_run_with, cmd_sweep, cmd_sweep_with, Backends, Manifest,
    MetricsFile, RunMetrics, RunOutcome, RunStatus, SplitInfo, Sweep, SWEEP_CSV_HEADER,
};
pub use config::RunConfig;

use crate::corpus::StageCategory;
use crate::error::Result;
use crate::pipelines::{Method, RagQueryMode};

#[derive(Debug, Parser)]
#[command(
    name = "stagepipe",
    version,
    about = "LLM workflows for TNM staging of pathology reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and print its label distribution.
    Ingest(SharedArgs),
    /// Chunk and embed a guideline document into an index file.
    Index {
        #[command(flatten)]
        shared: SharedArgs,
        /// Where to write the index (default: <out>/index.json).
        #[arg(long = "index-out")]
        index_out: Option<PathBuf>,
    },
    /// Run one method and write predictions, metrics and a manifest.
    Run(SharedArgs),
    /// Rerun KEwLTM across training counts or similarity thresholds.
    Sweep {
        #[command(flatten)]
        shared: SharedArgs,
        /// Comma-separated training counts, e.g. 10,20,30.
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "thresholds",
            required_unless_present = "thresholds"
        )]
        train_counts: Vec<usize>,
        /// Comma-separated similarity thresholds, e.g. 0,80.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
    },
    /// Score prediction files and tally error-cause annotations.
    Evaluate {
        #[command(flatten)]
        shared: SharedArgs,
        /// Prediction JSONL file; give twice to compare unique errors.
        #[arg(long = "predictions")]
        predictions: Vec<PathBuf>,
        /// JSONL error-cause annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
}

/// Options shared by every command. Each may also come from the named
/// environment variable or the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// JSON config file (a run manifest also works).
    #[arg(long, env = "STAGEPIPE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "STAGEPIPE_CATEGORY")]
    pub category: Option<StageCategory>,
    #[arg(long, env = "STAGEPIPE_METHOD")]
    pub method: Option<Method>,
    #[arg(long, env = "STAGEPIPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, env = "STAGEPIPE_GUIDELINE")]
    pub guideline: Option<PathBuf>,
    /// Prebuilt chunk index for rag/kewrag.
    #[arg(long, env = "STAGEPIPE_INDEX")]
    pub index: Option<PathBuf>,
    #[arg(long, env = "STAGEPIPE_K")]
    pub k: Option<usize>,
    /// Memory similarity threshold on a 0-100 scale.
    #[arg(long, env = "STAGEPIPE_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long, env = "STAGEPIPE_N_TRAIN")]
    pub n_train: Option<usize>,
    #[arg(long, env = "STAGEPIPE_SPLITS")]
    pub splits: Option<usize>,
    #[arg(long, env = "STAGEPIPE_TRAIN_SIZE")]
    pub train_size: Option<usize>,
    #[arg(long, env = "STAGEPIPE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "STAGEPIPE_OUT")]
    pub out: Option<PathBuf>,
    /// Replay script; replaces the live endpoints.
    #[arg(long, env = "STAGEPIPE_SCRIPT")]
    pub script: Option<PathBuf>,
    /// Directory of template overrides.
    #[arg(long, env = "STAGEPIPE_TEMPLATES")]
    pub templates: Option<PathBuf>,
    #[arg(long, env = "STAGEPIPE_RAG_QUERY_MODE")]
    pub rag_query_mode: Option<RagQueryMode>,
    #[arg(long, env = "STAGEPIPE_CHAT_MODEL")]
    pub chat_model: Option<String>,
    #[arg(long, env = "STAGEPIPE_EMBED_MODEL")]
    pub embed_model: Option<String>,
    #[arg(long, env = "STAGEPIPE_TEMPERATURE")]
    pub temperature: Option<f64>,
    #[arg(long, env = "STAGEPIPE_MAX_TOKENS")]
    pub max_tokens: Option<u32>,
    #[arg(long, env = "STAGEPIPE_MAX_IN_FLIGHT")]
    pub max_in_flight: Option<usize>,
    /// Forward the output schema to the server for constrained decoding.
    #[arg(long, env = "STAGEPIPE_CONSTRAINED_DECODING")]
    pub constrained_decoding: Option<bool>,
}

impl SharedArgs {
    /// The explicitly given values, keyed by config field name.
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(key.to_string(), v);
            }
        };
        fn val<T: serde::Serialize>(v: &Option<T>) -> Option<Value> {
            v.as_ref()
                .map(|x| serde_json::to_value(x).expect("plain values serialize"))
        }
        put("category", val(&self.category));
        put("method", val(&self.method));
        put("corpus_path", val(&self.corpus));
        put("guideline_path", val(&self.guideline));
        put("index_path", val(&self.index));
        put("k", val(&self.k));
        put("threshold", val(&self.threshold));
        put("n_train", val(&self.n_train));
        put("n_splits", val(&self.splits));
        put("train_size", val(&self.train_size));
        put("base_seed", val(&self.seed));
        put("output_dir", val(&self.out));
        put("script_path", val(&self.script));
        put("templates_dir", val(&self.templates));
        put("rag_query_mode", val(&self.rag_query_mode));
        put("chat_model", val(&self.chat_model));
        put("embed_model", val(&self.embed_model));
        put("temperature", val(&self.temperature));
        put("max_tokens", val(&self.max_tokens));
        put("max_in_flight", val(&self.max_in_flight));
        put("constrained_decoding", val(&self.constrained_decoding));
        Ok(m)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.overrides()?)
    }
}

pub fn parse<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args)
}

/// Executes a parsed command and returns the text to print.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Ingest(shared) => cmd_ingest(&shared.resolve()?),
        Command::Index { shared, index_out } => {
            let cfg = shared.resolve()?;
            cfg.guideline_path()?;
            let out = index_out.unwrap_or_else(|| cfg.output_dir.join("index.json"));
            let backends = Backends::from_config(&cfg, true)?;
            cmd_index(&cfg, &out, &backends)
        }
        Command::Run(shared) => {
            let cfg = shared.resolve()?;
            let outcome = cmd_run(&cfg)?;
            let m = &outcome.metrics;
            Ok(format!(
                "{} {}: {} predictions, {} run(s)\nmacro precision {}  recall {}  f1 {}\nerrors {} ({})\noutputs in {}\n",
                m.method,
                m.category,
                outcome.records.len(),
                m.runs.len(),
                m.display["precision"],
                m.display["recall"],
                m.display["f1"],
                m.num_errors,
                m.error_pct,
                cfg.output_dir.display()
            ))
        }
        Command::Sweep {
            shared,
            train_counts,
            thresholds,
        } => {
            let cfg = shared.resolve()?;
            let sweep = if train_counts.is_empty() {
                Sweep::Thresholds(thresholds)
            } else {
                Sweep::TrainCounts(train_counts)
            };
            cmd_sweep(&cfg, &sweep)
        }
        Command::Evaluate {
            shared,
            predictions,
            annotations,
        } => cmd_evaluate(&shared.resolve()?, &predictions, annotations.as_deref()),
    }
}
