//! Chat-completion service interface.
//!
//! Everything that talks to a language model goes through [`ChatService`], so
//! the loop runs unchanged against a hosted OpenAI-compatible endpoint, a local
//! inference server, the simulated model in [`crate::simulation`], or a replay
//! of recorded responses.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed service response: {0}")]
    Decode(String),
    #[error("replay exhausted: no recorded response left")]
    ReplayExhausted,
}

impl ServiceError {
    /// Transport failures, rate limiting and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ServiceError::Transport(_) => true,
            ServiceError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

/// A chat model: messages in, assistant text out.
///
/// Implementations must be shareable across the worker pool that issues the
/// per-pair disambiguation queries of one iteration.
pub trait ChatService: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError>;
}

impl<T: ChatService + ?Sized> ChatService for &T {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        (**self).complete(messages)
    }
}

impl<T: ChatService + ?Sized> ChatService for Box<T> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatClientConfig {
    /// Base URL without the `/v1/...` suffix, e.g. `http://localhost:8000`.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    120
}

#[derive(Serialize)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f32,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Blocking client for `POST /v1/chat/completions`.
pub struct OpenAiChatClient {
    config: ChatClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl OpenAiChatClient {
    pub fn new(config: ChatClientConfig, api_key: Option<String>) -> Result<Self, ServiceError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        let body = ChatCompletionRequest {
            model: &self.config.model,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let mut request = self.http.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| ServiceError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ServiceError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ServiceError::Http { status: status.as_u16(), body: text });
        }
        let parsed: ChatCompletionResponse =
            serde_json::from_str(&text).map_err(|e| ServiceError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ServiceError::Decode("response has no choices[0].message.content".into()))
    }
}

impl ChatService for OpenAiChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            match self.send_once(messages) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    log::warn!("chat request failed (attempt {}): {e}", attempt + 1);
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Replays recorded responses.
///
/// An ordered replay hands out responses in call order, ignoring the request
/// content; this suits scripted multi-turn tests (a malformed reply followed
/// by a valid one, for instance). A keyed replay matches each request to the
/// longest key contained in its last user message and pops that key's next
/// response, so fixtures captured from a live model replay correctly even
/// when requests arrive in a different order.
#[derive(Debug, Default)]
pub struct ReplayChat {
    responses: Mutex<VecDeque<String>>,
    keyed: Mutex<Vec<(String, VecDeque<String>)>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplayDocument {
    Ordered(Vec<String>),
    Keyed(std::collections::BTreeMap<String, OneOrMany>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl ReplayChat {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { responses: Mutex::new(responses.into_iter().map(Into::into).collect()), ..Self::default() }
    }

    pub fn keyed<I, K, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, Vec<S>)>,
        K: Into<String>,
        S: Into<String>,
    {
        let mut keyed: Vec<(String, VecDeque<String>)> = entries
            .into_iter()
            .map(|(k, v)| (k.into(), v.into_iter().map(Into::into).collect()))
            .collect();
        // longest first, so "Arctic Tern" wins over "Tern"
        keyed.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Self { keyed: Mutex::new(keyed), ..Self::default() }
    }

    /// Loads a JSON array of responses (ordered replay) or an object mapping
    /// keys to a response or a list of responses (keyed replay).
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str(text)? {
            ReplayDocument::Ordered(responses) => Self::new(responses),
            ReplayDocument::Keyed(map) => Self::keyed(map.into_iter().map(|(k, v)| match v {
                OneOrMany::One(r) => (k, vec![r]),
                OneOrMany::Many(rs) => (k, rs),
            })),
        })
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().expect("replay lock").clone()
    }

    pub fn remaining(&self) -> usize {
        let keyed: usize = self.keyed.lock().expect("replay lock").iter().map(|(_, q)| q.len()).sum();
        self.responses.lock().expect("replay lock").len() + keyed
    }
}

impl ChatService for ReplayChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        self.requests.lock().expect("replay lock").push(messages.to_vec());
        let mut keyed = self.keyed.lock().expect("replay lock");
        if !keyed.is_empty() {
            let prompt = messages.iter().rev().find(|m| m.role == "user").map_or("", |m| m.content.as_str());
            return keyed
                .iter_mut()
                .find(|(key, _)| prompt.contains(key.as_str()))
                .and_then(|(_, queue)| queue.pop_front())
                .ok_or(ServiceError::ReplayExhausted);
        }
        drop(keyed);
        self.responses
            .lock()
            .expect("replay lock")
            .pop_front()
            .ok_or(ServiceError::ReplayExhausted)
    }
}
