//! Chat-completion client for the MLLM, foundation, judge, selector and
//! summarizer roles.
//!
//! [`ModelClient`] adds per-endpoint admission control, a wall-clock timeout
//! and retries with exponential backoff (full jitter) on top of a
//! [`Transport`]. [`HttpTransport`] speaks the common chat-completions wire
//! format.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use vdr_core::react::parse_react;
use vdr_core::sim::describe_image;
use vdr_core::{ImagePayload, ImageRef};

use crate::error::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageRef>,
    /// Set on tool turns: the call this turn answers.
    pub call_id: Option<String>,
}

impl ChatTurn {
    fn plain(role: Role, text: impl Into<String>) -> Self {
        Self { role, text: text.into(), images: Vec::new(), call_id: None }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::plain(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::plain(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, text)
    }

    pub fn tool(call_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { call_id: Some(call_id.into()), ..Self::plain(Role::Tool, text) }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.images.push(image);
        self
    }
}

/// Observation ids for crops are `{call_id}#{k}`; both forms answer `call_id`.
fn answers(for_call: &str, call_id: &str) -> bool {
    for_call == call_id || for_call.strip_prefix(call_id).is_some_and(|rest| rest.starts_with('#'))
}

/// Every tool turn must answer a call issued by an earlier assistant turn.
pub fn validate_turns(turns: &[ChatTurn]) -> Result<(), GatewayError> {
    let mut issued: Vec<String> = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        match turn.role {
            Role::Assistant => {
                if let Ok(parsed) = parse_react(&turn.text) {
                    if let vdr_core::ParsedAction::Calls(calls) = parsed.action {
                        issued.extend(calls.into_iter().map(|c| c.call_id));
                    }
                }
            }
            Role::Tool => {
                let Some(id) = &turn.call_id else {
                    return Err(GatewayError::InvalidRequest(format!("tool turn {i} has no call_id")));
                };
                if !issued.iter().any(|c| answers(id, c)) {
                    return Err(GatewayError::InvalidRequest(format!(
                        "tool turn {i} answers unknown call {id}"
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Which role a request plays. Real endpoints only see the rendered turns;
/// simulated models dispatch on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Policy,
    ProposeRegions,
    JudgeHit,
    Describe,
    Summarize,
    Verify,
    SelectImage,
    MatchEntity,
    DirectAnswer,
    EntityQuestion,
    DraftQuestion,
    SelectQuestion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub purpose: Purpose,
    pub turns: Vec<ChatTurn>,
    /// Template variables the turns were rendered from.
    pub vars: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(purpose: Purpose) -> Self {
        Self { purpose, turns: Vec::new(), vars: BTreeMap::new() }
    }

    pub fn turn(mut self, turn: ChatTurn) -> Self {
        self.turns.push(turn);
        self
    }

    pub fn var(mut self, key: &str, value: impl Into<String>) -> Self {
        self.vars.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> &str {
        self.vars.get(key).map_or("", String::as_str)
    }

    /// Images attached to any turn, in order.
    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.turns.iter().flat_map(|t| t.images.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub attempts: u32,
}

#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError>;
}

#[async_trait]
impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (**self).chat(request).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 500 }
    }
}

const MAX_BACKOFF_MS: u64 = 30_000;

impl RetryPolicy {
    /// Full jitter: uniform in `[0, base * 2^(attempt-1)]`, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ceiling = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(20))
            .min(MAX_BACKOFF_MS);
        Duration::from_millis(rand::rng().random_range(0..=ceiling))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

fn default_in_flight() -> usize {
    8
}

fn default_timeout() -> u64 {
    120_000
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            max_in_flight: default_in_flight(),
            timeout_ms: default_timeout(),
            retry: RetryPolicy::default(),
            api_key: None,
        }
    }

    /// Field-level problems, each as `field: message`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.base_url.trim().is_empty() {
            out.push("base_url: must not be empty".to_string());
        }
        if self.model_name.trim().is_empty() {
            out.push("model_name: must not be empty".to_string());
        }
        if self.max_in_flight < 1 {
            out.push("max_in_flight: must be at least 1".to_string());
        }
        if self.retry.max_attempts < 1 {
            out.push("retry.max_attempts: must be at least 1".to_string());
        }
        if self.timeout_ms == 0 {
            out.push("timeout_ms: must be positive".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
            TransportError::Decode(_) => false,
        }
    }
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<String, TransportError>;
}

pub struct ModelClient<T> {
    endpoint: ModelEndpoint,
    transport: T,
    permits: Arc<Semaphore>,
}

impl<T: Transport> ModelClient<T> {
    pub fn new(endpoint: ModelEndpoint, transport: T) -> Self {
        let permits = Arc::new(Semaphore::new(endpoint.max_in_flight.max(1)));
        Self { endpoint, transport, permits }
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }
}

#[async_trait]
impl<T: Transport> ChatModel for ModelClient<T> {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        validate_turns(&request.turns)?;
        let max_attempts = self.endpoint.retry.max_attempts.max(1);
        let limit = Duration::from_millis(self.endpoint.timeout_ms);
        let mut last = TransportError::Timeout;
        for attempt in 1..=max_attempts {
            let result = {
                let _permit = self.permits.acquire().await.map_err(|_| GatewayError::Closed)?;
                match tokio::time::timeout(limit, self.transport.send(&self.endpoint, request)).await {
                    Ok(r) => r,
                    Err(_) => Err(TransportError::Timeout),
                }
            };
            match result {
                Ok(text) => return Ok(ChatReply { text, attempts: attempt }),
                Err(TransportError::Status { code, body }) if !(code == 429 || code >= 500) => {
                    return Err(GatewayError::Http { status: code, body, attempts: attempt });
                }
                Err(TransportError::Decode(msg)) => {
                    return Err(GatewayError::InvalidResponse { message: msg, attempts: attempt });
                }
                Err(e) => {
                    tracing::debug!(model = %self.endpoint.model_name, attempt, error = %e, "transient failure");
                    last = e;
                    if attempt < max_attempts {
                        tokio::time::sleep(self.endpoint.retry.backoff(attempt)).await;
                    }
                }
            }
        }
        Err(match last {
            TransportError::Timeout => GatewayError::Timeout { attempts: max_attempts },
            other => GatewayError::Exhausted { attempts: max_attempts, last: other.to_string() },
        })
    }
}

/// Chat-completions over HTTP: `POST {base_url}/chat/completions`.
#[derive(Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self { client: reqwest::Client::new() }
    }
}

fn data_url(image: &ImageRef) -> Option<String> {
    match &image.payload {
        ImagePayload::Encoded { data } => {
            let mime = image::guess_format(data).map_or("application/octet-stream", |f| f.to_mime_type());
            Some(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(data)))
        }
        ImagePayload::Sim { .. } => None,
    }
}

/// Message list in the chat-completions format. Tool turns travel as user
/// messages wrapped in `<tool_response>` since calls are emitted as text.
pub fn wire_messages(turns: &[ChatTurn]) -> Vec<Value> {
    turns
        .iter()
        .map(|turn| {
            let role = match turn.role {
                Role::System => "system",
                Role::User | Role::Tool => "user",
                Role::Assistant => "assistant",
            };
            let text = match (&turn.role, &turn.call_id) {
                (Role::Tool, Some(id)) => format!("<tool_response id=\"{id}\">\n{}\n</tool_response>", turn.text),
                _ => turn.text.clone(),
            };
            if turn.images.is_empty() {
                return json!({ "role": role, "content": text });
            }
            let mut parts = vec![json!({ "type": "text", "text": text })];
            for image in &turn.images {
                match data_url(image) {
                    Some(url) => parts.push(json!({ "type": "image_url", "image_url": { "url": url } })),
                    None => parts.push(json!({ "type": "text", "text": describe_image(image) })),
                }
            }
            json!({ "role": role, "content": parts })
        })
        .collect()
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = json!({ "model": endpoint.model_name, "messages": wire_messages(&request.turns) });
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = endpoint.api_key.as_deref().filter(|k| !k.is_empty()) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| TransportError::Connect(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status { code: status.as_u16(), body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_turn_must_follow_its_call() {
        let call = "<tool_call>[{\"id\":\"c1\",\"name\":\"web_search\",\"arguments\":{\"query\":\"x\"}}]</tool_call>";
        let ok = [ChatTurn::user("q"), ChatTurn::assistant(call), ChatTurn::tool("c1", "r")];
        assert!(validate_turns(&ok).is_ok());
        let crop = [ChatTurn::user("q"), ChatTurn::assistant(call), ChatTurn::tool("c1#0", "r")];
        assert!(validate_turns(&crop).is_ok());
        let orphan = [ChatTurn::user("q"), ChatTurn::tool("c9", "r")];
        assert!(validate_turns(&orphan).is_err());
    }

    #[test]
    fn backoff_stays_under_ceiling() {
        let p = RetryPolicy { max_attempts: 5, backoff_base_ms: 10 };
        for attempt in 1..6 {
            assert!(p.backoff(attempt) <= Duration::from_millis(10 << (attempt - 1)));
        }
    }

    #[test]
    fn tool_turns_are_wrapped() {
        let m = wire_messages(&[ChatTurn::tool("c1", "evidence")]);
        assert_eq!(m[0]["role"], "user");
        assert!(m[0]["content"].as_str().unwrap().contains("<tool_response id=\"c1\">"));
    }
}
