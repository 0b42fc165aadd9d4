//! Breast cancer TNM staging from pathology reports with LLM workflows:
//! zero-shot chain of thought, retrieval-augmented prompting, and two
//! knowledge-elicitation variants that induce or elicit a rule memory.

use std::path::Path;

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod llm;
pub mod memory;
pub mod pipelines;
pub mod prompts;
pub mod retrieval;

pub use corpus::{Corpus, Report, Split, StageCategory, StageLabel};
pub use error::{Error, Result};
pub use memory::{RuleMemory, UpdateTrace};
pub use pipelines::{Engine, Method, Predicted, PredictionRecord};

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
