use std::path::PathBuf;

use crate::corpus::StageCategory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {reason}")]
    CorpusLine { path: String, line: usize, reason: String },

    #[error("duplicate report id {0:?}")]
    DuplicateId(String),

    #[error("unknown stage label {0:?}")]
    UnknownLabel(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("authentication failed: {0}")]
    Auth(String),

    /// The model never produced schema-valid output within the retry budget.
    #[error("schema violation after {attempts} attempts: {reason}")]
    SchemaExhausted { attempts: u32, reason: String },

    #[error("script exhausted")]
    ScriptExhausted,

    #[error("malformed script: {0}")]
    Script(String),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("template {template}: {reason}")]
    Template { template: String, reason: String },

    #[error("missing placeholder {0:?}")]
    MissingPlaceholder(String),

    #[error("extraneous placeholder {0:?}")]
    ExtraneousPlaceholder(String),

    #[error("empty binding for placeholder {0:?}")]
    EmptyBinding(String),

    #[error("invalid memory: {0}")]
    InvalidMemory(String),

    #[error("category mismatch: expected {expected}, found {found}")]
    CategoryMismatch {
        expected: StageCategory,
        found: StageCategory,
    },

    #[error("unknown report id {0:?}")]
    UnknownReport(String),

    #[error("report {id:?} has no gold {category} label")]
    MissingGold { id: String, category: StageCategory },

    #[error("record sets disagree: {0}")]
    Mismatch(String),

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that abort a whole run rather than a single record.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Auth(_))
    }
}
