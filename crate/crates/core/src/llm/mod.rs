//! Chat and embedding clients.
//!
//! [`LlmClient`] wraps any [`ChatBackend`] and guarantees that every output it
//! returns satisfies the request's [`OutputSchema`]. Backends that enforce the
//! schema during decoding receive it with the request; output is validated
//! locally either way, and violations trigger a corrective re-prompt.

mod http;
mod schema;
mod scripted;

use std::sync::Arc;

pub use http::{EndpointConfig, OpenAiChat, OpenAiEmbedder, TransportPolicy};
pub use schema::{validate, OutputSchema, StructuredOutput};
pub use scripted::{ScriptEntry, ScriptKey, ScriptKind, ScriptedBackend};

use crate::error::{Error, Result};

pub const DEFAULT_SCHEMA_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Template the request was rendered from; scripted backends key on it.
    pub template: String,
    pub system: Option<String>,
    pub user: String,
    pub schema: OutputSchema,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(template: impl Into<String>, user: impl Into<String>, schema: OutputSchema) -> Self {
        ChatRequest {
            template: template.into(),
            system: None,
            user: user.into(),
            schema,
            temperature: 0.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_id: String,
}

/// A source of raw chat completions.
pub trait ChatBackend: Send + Sync {
    /// Returns the model's raw text for one request.
    fn complete(&self, request: &ChatRequest) -> Result<String>;

    /// Whether the schema is enforced server-side during decoding.
    fn constrained_decoding(&self) -> bool {
        false
    }

    /// Upper bound on concurrent requests the caller should issue.
    fn max_in_flight(&self) -> usize {
        DEFAULT_MAX_IN_FLIGHT
    }

    fn model_id(&self) -> String;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn model_id(&self) -> String;
}

/// Checks the batch contract shared by all embedders.
pub fn check_embeddings(texts: &[String], vectors: &[EmbeddingVector]) -> Result<()> {
    if vectors.len() != texts.len() {
        return Err(Error::Transport(format!(
            "embedding endpoint returned {} vectors for {} inputs",
            vectors.len(),
            texts.len()
        )));
    }
    if let Some(first) = vectors.first() {
        let dim = first.values.len();
        for v in vectors {
            if v.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.values.len(),
                });
            }
            if v.values.iter().all(|&x| x == 0.0) {
                return Err(Error::Transport(
                    "embedding endpoint returned an all-zero vector".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Embeds texts through `embedder`, validating inputs and the returned batch.
pub fn embed(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::InvalidArgument(format!("embedding input {i} is empty")));
    }
    let vectors = embedder.embed(texts)?;
    check_embeddings(texts, &vectors)?;
    Ok(vectors)
}

#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    retries: u32,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("model", &self.backend.model_id())
            .field("retries", &self.retries)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        LlmClient {
            backend,
            retries: DEFAULT_SCHEMA_RETRIES,
        }
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn model_id(&self) -> String {
        self.backend.model_id()
    }

    pub fn max_in_flight(&self) -> usize {
        self.backend.max_in_flight().max(1)
    }

    /// Sends `request` and returns schema-valid output.
    ///
    /// A violating answer is retried up to the retry budget, each time with a
    /// corrective instruction naming the violated constraint appended to the
    /// original user text. Exhaustion yields [`Error::SchemaExhausted`].
    pub fn chat(&self, request: &ChatRequest) -> Result<StructuredOutput> {
        if request.user.trim().is_empty() {
            return Err(Error::InvalidArgument("chat request has empty user text".into()));
        }
        let mut attempt = request.clone();
        let mut last_reason = String::new();
        for n in 0..=self.retries {
            let raw = self.backend.complete(&attempt)?;
            match validate(&raw, request.schema) {
                Ok(out) => return Ok(out),
                Err(reason) => {
                    log::debug!("{}: attempt {} rejected: {reason}", request.template, n + 1);
                    attempt.user = corrective(&request.user, &reason, request.schema);
                    last_reason = reason;
                }
            }
        }
        Err(Error::SchemaExhausted {
            attempts: self.retries + 1,
            reason: last_reason,
        })
    }
}

fn corrective(original: &str, reason: &str, schema: OutputSchema) -> String {
    format!(
        "{original}\n\nYour previous answer was rejected: {reason}. Answer again with {} and nothing else.",
        schema.describe()
    )
}
