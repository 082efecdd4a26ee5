//! Chat-completion and embedding provider contracts, the HTTP clients behind
//! them, and the shared retry policy.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const ENV_CHAT_BASE_URL: &str = "MFTR_CHAT_BASE_URL";
pub const ENV_CHAT_API_KEY: &str = "MFTR_CHAT_API_KEY";
pub const ENV_CHAT_MODEL: &str = "MFTR_CHAT_MODEL";
pub const ENV_EMBED_BASE_URL: &str = "MFTR_EMBED_BASE_URL";
pub const ENV_EMBED_API_KEY: &str = "MFTR_EMBED_API_KEY";
pub const ENV_EMBED_MODEL: &str = "MFTR_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl LlmRequest {
    /// Greedy decoding: temperature 0, nucleus mass 1.0, 2048 output tokens.
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        LlmRequest {
            messages,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: Option<String>,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse>;
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the model; part of every embedding cache key.
    fn tag(&self) -> &str;

    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Retries transport failures with exponential backoff. Any other error is
/// returned immediately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based): base, 2·base, 4·base, ...
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Err(Error::Transport(msg)) if attempt < attempts => {
                    let delay = self.delay(attempt);
                    log::warn!("transport error (attempt {attempt}/{attempts}), retrying in {delay:?}: {msg}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    fn from_env(url_var: &str, key_var: &str, model_var: &str) -> Result<Self> {
        let base_url = std::env::var(url_var)
            .map_err(|_| Error::Config(format!("{url_var} is not set (or pass --mock-llm)")))?;
        let model = std::env::var(model_var)
            .map_err(|_| Error::Config(format!("{model_var} is not set")))?;
        Ok(HttpConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(key_var).ok().filter(|k| !k.is_empty()),
            model,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        })
    }

    pub fn chat_from_env() -> Result<Self> {
        Self::from_env(ENV_CHAT_BASE_URL, ENV_CHAT_API_KEY, ENV_CHAT_MODEL)
    }

    pub fn embedding_from_env() -> Result<Self> {
        Self::from_env(ENV_EMBED_BASE_URL, ENV_EMBED_API_KEY, ENV_EMBED_MODEL)
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn post_json(&self, agent: &ureq::Agent, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{}", self.base_url, path);
        let mut req = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("reading response from {url}: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Error::Provider(format!("{url} returned non-JSON body: {e}"))),
            429 | 500..=599 => Err(Error::Transport(format!(
                "{url} returned HTTP {status}: {text}"
            ))),
            _ => Err(Error::Provider(format!(
                "{url} returned HTTP {status}: {text}"
            ))),
        }
    }
}

/// Chat-completion client for any endpoint following the common
/// `POST {base}/chat/completions` JSON convention.
pub struct HttpChatProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = config.agent();
        HttpChatProvider { config, agent }
    }

    pub fn from_env() -> Result<Self> {
        Ok(Self::new(HttpConfig::chat_from_env()?))
    }

    pub fn request_body(&self, request: &LlmRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        })
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let body = self.request_body(request);
        let value = self.config.retry.run(|| {
            self.config
                .post_json(&self.agent, "chat/completions", &body)
        })?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| Error::Provider("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Provider("choice has no message content".into()))?;
        Ok(LlmResponse {
            text: text.to_string(),
            finish_reason: choice
                .get("finish_reason")
                .and_then(Value::as_str)
                .map(str::to_string),
        })
    }
}

/// Embedding client: `POST {base}/embeddings` with `{"model", "input": [..]}`.
/// Accepts either `{"data": [{"embedding": [..]}, ..]}`, `{"embeddings": [[..], ..]}`
/// or a bare array of arrays.
pub struct HttpEmbeddingProvider {
    config: HttpConfig,
    agent: ureq::Agent,
    tag: String,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = config.agent();
        let tag = format!("http:{}", config.model);
        HttpEmbeddingProvider { config, agent, tag }
    }

    pub fn from_env() -> Result<Self> {
        Ok(Self::new(HttpConfig::embedding_from_env()?))
    }
}

pub(crate) fn parse_embedding_response(value: &Value) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<&Value> = if let Some(data) = value.get("data").and_then(Value::as_array) {
        let mut items: Vec<(u64, &Value)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item
                    .get("index")
                    .and_then(Value::as_u64)
                    .unwrap_or(i as u64);
                (idx, item.get("embedding").unwrap_or(&Value::Null))
            })
            .collect();
        items.sort_by_key(|(i, _)| *i);
        items.into_iter().map(|(_, v)| v).collect()
    } else if let Some(list) = value.get("embeddings").and_then(Value::as_array) {
        list.iter().collect()
    } else if let Some(list) = value.as_array() {
        list.iter().collect()
    } else {
        return Err(Error::Provider(
            "unrecognized embedding response shape".into(),
        ));
    };
    rows.into_iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| Error::Provider("embedding is not an array".into()))?
                .iter()
                .map(|x| {
                    x.as_f64().ok_or_else(|| {
                        Error::Provider("embedding component is not a number".into())
                    })
                })
                .collect()
        })
        .collect()
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.config.model, "input": texts });
        let value = self
            .config
            .retry
            .run(|| self.config.post_json(&self.agent, "embeddings", &body))?;
        let vectors = parse_embedding_response(&value)?;
        if vectors.len() != texts.len() {
            return Err(Error::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        Ok(vectors)
    }
}

/// Returns the outermost `{...}` span of a model reply, tolerating code
/// fences and surrounding prose.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Runs a request whose reply must satisfy `parse`. On a parse failure the
/// model gets one repair turn with the error message; a second failure is
/// returned as `Err(message)`. On success returns the parsed value and the
/// reply text that produced it.
pub fn complete_structured<T>(
    provider: &dyn ChatProvider,
    request: LlmRequest,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> Result<std::result::Result<(T, String), String>> {
    let first = provider.complete(&request)?;
    let err = match parse(&first.text) {
        Ok(v) => return Ok(Ok((v, first.text))),
        Err(e) => e,
    };
    log::debug!("unparseable model output, requesting repair: {err}");
    let mut messages = request.messages;
    messages.push(ChatMessage::assistant(first.text));
    messages.push(ChatMessage::user(format!(
        "Your reply could not be used: {err}. Reply again with only the corrected JSON object."
    )));
    let repair = LlmRequest {
        messages,
        ..request
    };
    let second = provider.complete(&repair)?;
    Ok(parse(&second.text).map(|v| (v, second.text)))
}
