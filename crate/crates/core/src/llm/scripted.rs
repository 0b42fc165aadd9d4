//! Replay backend for deterministic runs without a model.
//!
//! A script is a JSON list of entries:
//!
//! ```json
//! [
//!   {"key": {"template": "ltm_elicit", "index": 1}, "kind": "chat",
//!    "body": {"reasoning": "...", "stage": "T2", "rules": ["..."]}},
//!   {"key": null, "kind": "chat", "body": {"raw": "not json at all"}},
//!   {"key": {"template": "ltm_inference"}, "kind": "chat",
//!    "body": {"reasoning": "...", "stage": "T1"}},
//!   {"key": null, "kind": "embed", "body": {"text": "chest wall", "vector": [0.1, 0.2]}}
//! ]
//! ```
//!
//! Chat calls are matched in this order: an unconsumed entry keyed by
//! `(template, index)` where `index` counts calls to that template from 1; the
//! next unconsumed keyless entry; a reusable entry keyed by template alone.
//! A body of the form `{"raw": "..."}` is returned verbatim, any other body is
//! returned as compact JSON.
//!
//! Embed entries with a `text` form a reusable text → vector map; entries
//! without one are consumed in order for texts the map does not cover.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptKey {
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub key: Option<ScriptKey>,
    pub kind: ScriptKind,
    pub body: Value,
}

impl ScriptEntry {
    /// Keyless chat entry answering with `body` as JSON.
    pub fn chat(body: Value) -> Self {
        ScriptEntry {
            key: None,
            kind: ScriptKind::Chat,
            body,
        }
    }

    /// Keyless chat entry answering with verbatim text.
    pub fn raw_chat(text: &str) -> Self {
        Self::chat(json!({ "raw": text }))
    }

    /// Chat entry bound to the `index`-th call (1-based) of `template`.
    pub fn keyed(template: &str, index: u32, body: Value) -> Self {
        ScriptEntry {
            key: Some(ScriptKey {
                template: template.to_string(),
                index: Some(index),
            }),
            kind: ScriptKind::Chat,
            body,
        }
    }

    /// Reusable chat entry for every otherwise unmatched call of `template`.
    pub fn template_default(template: &str, body: Value) -> Self {
        ScriptEntry {
            key: Some(ScriptKey {
                template: template.to_string(),
                index: None,
            }),
            kind: ScriptKind::Chat,
            body,
        }
    }

    pub fn embedding(text: Option<&str>, vector: Vec<f32>) -> Self {
        let mut body = json!({ "vector": vector });
        if let Some(t) = text {
            body["text"] = json!(t);
        }
        ScriptEntry {
            key: None,
            kind: ScriptKind::Embed,
            body,
        }
    }

    fn reply_text(&self) -> Result<String> {
        if let Value::Object(m) = &self.body {
            if m.len() == 1 {
                if let Some(v) = m.get("raw") {
                    return v
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Script("\"raw\" body must be a string".into()));
                }
            }
            return Ok(serde_json::to_string(&self.body)?);
        }
        Err(Error::Script("chat body must be an object".into()))
    }
}

#[derive(Default)]
struct State {
    consumed: HashSet<usize>,
    template_calls: HashMap<String, u32>,
    chat_log: Vec<ChatRequest>,
    embed_calls: usize,
}

/// Scripted chat and embedding backend. Calls are serialized internally.
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    text_vectors: HashMap<String, Vec<f32>>,
    state: Mutex<State>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("entries", &self.entries.len())
            .finish()
    }
}

fn vector_of(body: &Value) -> Result<Vec<f32>> {
    let arr = body
        .get("vector")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Script("embed body needs a \"vector\" list".into()))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| Error::Script("vector entries must be numbers".into()))
        })
        .collect()
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self::try_new(entries).expect("invalid script entries")
    }

    pub fn try_new(entries: Vec<ScriptEntry>) -> Result<Self> {
        let mut text_vectors = HashMap::new();
        for e in &entries {
            match e.kind {
                ScriptKind::Embed => {
                    let v = vector_of(&e.body)?;
                    if let Some(t) = e.body.get("text") {
                        let t = t
                            .as_str()
                            .ok_or_else(|| Error::Script("embed \"text\" must be a string".into()))?;
                        text_vectors.insert(t.to_string(), v);
                    }
                }
                ScriptKind::Chat => {
                    e.reply_text()?;
                }
            }
        }
        Ok(ScriptedBackend {
            entries,
            text_vectors,
            state: Mutex::new(State::default()),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text).map_err(|e| Error::Script(e.to_string()))?;
        Self::try_new(entries)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Total chat completions served, retries included.
    pub fn chat_calls(&self) -> usize {
        self.lock().chat_log.len()
    }

    pub fn calls_for(&self, template: &str) -> u32 {
        self.lock().template_calls.get(template).copied().unwrap_or(0)
    }

    /// Number of embed invocations (batches, not texts).
    pub fn embed_calls(&self) -> usize {
        self.lock().embed_calls
    }

    pub fn chat_log(&self) -> Vec<ChatRequest> {
        self.lock().chat_log.clone()
    }

    fn find_chat(&self, state: &State, template: &str, index: u32) -> Option<usize> {
        let open = |i: &usize| !state.consumed.contains(i);
        let exact = self.entries.iter().enumerate().position(|(i, e)| {
            e.kind == ScriptKind::Chat
                && open(&i)
                && matches!(&e.key, Some(k) if k.template == template && k.index == Some(index))
        });
        exact
            .or_else(|| {
                self.entries
                    .iter()
                    .enumerate()
                    .position(|(i, e)| e.kind == ScriptKind::Chat && e.key.is_none() && open(&i))
            })
            .or_else(|| {
                self.entries.iter().position(|e| {
                    e.kind == ScriptKind::Chat
                        && matches!(&e.key, Some(k) if k.template == template && k.index.is_none())
                })
            })
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut state = self.lock();
        let index = {
            let n = state.template_calls.entry(request.template.clone()).or_insert(0);
            *n += 1;
            *n
        };
        state.chat_log.push(request.clone());
        let Some(i) = self.find_chat(&state, &request.template, index) else {
            let remaining = self
                .entries
                .iter()
                .enumerate()
                .any(|(i, e)| e.kind == ScriptKind::Chat && !state.consumed.contains(&i));
            return Err(if remaining {
                Error::Script(format!("no entry for {} call {index}", request.template))
            } else {
                Error::ScriptExhausted
            });
        };
        let entry = &self.entries[i];
        let reusable = matches!(&entry.key, Some(k) if k.index.is_none());
        if !reusable {
            state.consumed.insert(i);
        }
        entry.reply_text()
    }

    fn max_in_flight(&self) -> usize {
        1
    }

    fn model_id(&self) -> String {
        "scripted".to_string()
    }
}

impl Embedder for ScriptedBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut state = self.lock();
        state.embed_calls += 1;
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            let values = match self.text_vectors.get(t) {
                Some(v) => v.clone(),
                None => {
                    let next = self.entries.iter().enumerate().position(|(i, e)| {
                        e.kind == ScriptKind::Embed && e.body.get("text").is_none() && !state.consumed.contains(&i)
                    });
                    let Some(i) = next else {
                        return Err(Error::ScriptExhausted);
                    };
                    state.consumed.insert(i);
                    vector_of(&self.entries[i].body)?
                }
            };
            out.push(EmbeddingVector {
                values,
                model_id: "scripted".to_string(),
            });
        }
        Ok(out)
    }

    fn model_id(&self) -> String {
        "scripted".to_string()
    }
}
