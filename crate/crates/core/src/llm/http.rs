//! OpenAI-compatible HTTP backends (`/v1/chat/completions`, `/v1/embeddings`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, Embedder, EmbeddingVector, DEFAULT_MAX_IN_FLIGHT};
use crate::error::{Error, Result};

pub const ENV_LLM_BASE: &str = "STAGEPIPE_LLM_BASE";
pub const ENV_LLM_KEY: &str = "STAGEPIPE_LLM_KEY";
pub const ENV_EMBED_BASE: &str = "STAGEPIPE_EMBED_BASE";
pub const ENV_EMBED_KEY: &str = "STAGEPIPE_EMBED_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for TransportPolicy {
    fn default() -> Self {
        TransportPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl EndpointConfig {
    fn url(&self, path: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/{path}")
    }

    /// Reads base URL and key from the chat (`embed = false`) or embedding env
    /// vars. Embeddings fall back to the chat endpoint when their own base URL
    /// is unset.
    pub fn from_env(model: impl Into<String>, embed: bool) -> Result<Self> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let (base_url, api_key) = match (embed, var(ENV_EMBED_BASE)) {
            (true, Some(base)) => (Some(base), var(ENV_EMBED_KEY)),
            _ => (var(ENV_LLM_BASE), var(ENV_LLM_KEY)),
        };
        let base_url = base_url.ok_or_else(|| Error::Config(format!("{ENV_LLM_BASE} is not set")))?;
        Ok(EndpointConfig {
            base_url,
            api_key,
            model: model.into(),
        })
    }
}

struct Transport {
    agent: ureq::Agent,
    policy: TransportPolicy,
}

impl Transport {
    fn new(policy: TransportPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(policy.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Transport { agent, policy }
    }

    /// POSTs JSON, retrying connection failures and 429/5xx with exponential backoff.
    fn post(&self, url: &str, key: Option<&str>, body: &Value) -> Result<Value> {
        let mut backoff = self.policy.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.policy.attempts.max(1) {
            let mut req = self.agent.post(url);
            if let Some(k) = key {
                req = req.header("Authorization", format!("Bearer {k}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    match status {
                        200..=299 => {
                            return serde_json::from_str(&text)
                                .map_err(|e| Error::Transport(format!("{url}: undecodable response: {e}")))
                        }
                        401 | 403 => return Err(Error::Auth(format!("{url}: HTTP {status}"))),
                        429 | 500..=599 => last = format!("{url}: HTTP {status}: {text}"),
                        _ => return Err(Error::Transport(format!("{url}: HTTP {status}: {text}"))),
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            if attempt < self.policy.attempts {
                log::warn!("transport attempt {attempt} failed ({last}); retrying in {backoff:?}");
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(Error::Transport(last))
    }
}

/// Chat completions against an OpenAI-compatible server.
pub struct OpenAiChat {
    endpoint: EndpointConfig,
    transport: Transport,
    constrained: bool,
    max_in_flight: usize,
}

impl OpenAiChat {
    pub fn new(endpoint: EndpointConfig, policy: TransportPolicy) -> Self {
        OpenAiChat {
            endpoint,
            transport: Transport::new(policy),
            constrained: false,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    /// Forward the output schema as `response_format` for server-side enforcement.
    pub fn with_constrained_decoding(mut self, on: bool) -> Self {
        self.constrained = on;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if self.constrained {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {
                    "name": request.schema.name(),
                    "schema": request.schema.json_schema(),
                    "strict": true,
                },
            });
        }
        body
    }
}

impl ChatBackend for OpenAiChat {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let url = self.endpoint.url("chat/completions");
        let resp = self
            .transport
            .post(&url, self.endpoint.api_key.as_deref(), &self.request_body(request))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Transport(format!("{url}: response has no message content")))
    }

    fn constrained_decoding(&self) -> bool {
        self.constrained
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn model_id(&self) -> String {
        self.endpoint.model.clone()
    }
}

pub struct OpenAiEmbedder {
    endpoint: EndpointConfig,
    transport: Transport,
}

impl OpenAiEmbedder {
    pub fn new(endpoint: EndpointConfig, policy: TransportPolicy) -> Self {
        OpenAiEmbedder {
            endpoint,
            transport: Transport::new(policy),
        }
    }
}

pub(crate) fn parse_embeddings(resp: &Value, n: usize, model: &str) -> Result<Vec<EmbeddingVector>> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Transport("embedding response has no data".into()))?;
    let mut slots: Vec<Option<Vec<f32>>> = vec![None; n];
    for (pos, item) in data.iter().enumerate() {
        let idx = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Transport("embedding item has no vector".into()))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| Error::Transport("embedding vector is not numeric".into()))?;
        let slot = slots
            .get_mut(idx)
            .ok_or_else(|| Error::Transport(format!("embedding index {idx} out of range")))?;
        *slot = Some(values);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.map(|values| EmbeddingVector {
                values,
                model_id: model.to_string(),
            })
            .ok_or_else(|| Error::Transport(format!("no embedding returned for input {i}")))
        })
        .collect()
}

impl Embedder for OpenAiEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let url = self.endpoint.url("embeddings");
        let body = json!({"model": self.endpoint.model, "input": texts});
        let resp = self.transport.post(&url, self.endpoint.api_key.as_deref(), &body)?;
        parse_embeddings(&resp, texts.len(), &self.endpoint.model)
    }

    fn model_id(&self) -> String {
        self.endpoint.model.clone()
    }
}
