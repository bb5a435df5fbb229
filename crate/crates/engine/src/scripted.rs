//! Deterministic model and transport fixtures.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;

use crate::error::GatewayError;
use crate::gateway::{ChatModel, ChatReply, ChatRequest, ModelEndpoint, Transport, TransportError};

/// Replies from a fixed script; the last entry repeats once the script runs out.
pub struct ScriptedModel {
    script: Vec<Result<String, GatewayError>>,
    next: AtomicUsize,
}

impl ScriptedModel {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::with_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn with_results(script: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        let script: Vec<_> = script.into_iter().collect();
        assert!(!script.is_empty(), "script needs at least one reply");
        Self { script, next: AtomicUsize::new(0) }
    }

    /// A model whose every call fails.
    pub fn failing() -> Self {
        Self::with_results([Err(GatewayError::Exhausted { attempts: 1, last: "endpoint down".into() })])
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatModel for ScriptedModel {
    async fn chat(&self, _request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst).min(self.script.len() - 1);
        self.script[i].clone().map(|text| ChatReply { text, attempts: 1 })
    }
}

/// Replies computed from the request.
pub struct FnModel<F>(pub F);

#[async_trait]
impl<F> ChatModel for FnModel<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        (self.0)(request).map(|text| ChatReply { text, attempts: 1 })
    }
}

/// Transport that plays back a queue of outcomes; the last one repeats.
pub struct SequenceTransport {
    script: Mutex<VecDeque<Result<String, TransportError>>>,
    sends: AtomicU32,
}

impl SequenceTransport {
    pub fn new(script: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        Self { script: Mutex::new(script.into_iter().collect()), sends: AtomicU32::new(0) }
    }

    pub fn sends(&self) -> u32 {
        self.sends.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Transport for SequenceTransport {
    async fn send(&self, _endpoint: &ModelEndpoint, _request: &ChatRequest) -> Result<String, TransportError> {
        self.sends.fetch_add(1, Ordering::SeqCst);
        let mut q = self.script.lock().unwrap();
        if q.len() > 1 {
            q.pop_front().unwrap()
        } else {
            q.front().cloned().unwrap_or(Err(TransportError::Connect("empty script".into())))
        }
    }
}
