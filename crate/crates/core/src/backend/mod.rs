//! Answer-producing models behind one blocking interface.
//!
//! Three implementations live here: [`wire::ChatCompletionsBackend`] for
//! OpenAI-compatible HTTP endpoints, [`simulated::SimulatedBackend`] for
//! offline runs driven by a knowledge-profile table, and the
//! [`cache::ResponseCache`] that sits in front of either.

pub mod cache;
pub mod simulated;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::PromptVariant;

pub use cache::{cached_query, CacheStats, ResponseCache};
pub use simulated::{simulate_response, KnowledgeProfile, ProfileTable, SimulatedBackend, VerifierPolicy};
pub use wire::ChatCompletionsBackend;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Network failure or timeout; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The endpoint replied with something we cannot use.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no knowledge profile for question {0}")]
    ProfileMissing(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub want_logprobs: bool,
    pub top_logprobs_k: u8,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 8,
            want_logprobs: false,
            top_logprobs_k: 20,
        }
    }
}

impl Decoding {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be a finite non-negative number",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if !(1..=20).contains(&self.top_logprobs_k) {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs_k {} outside 1..=20",
                self.top_logprobs_k
            )));
        }
        if self.want_logprobs && self.top_logprobs_k < 2 {
            return Err(BackendError::InvalidRequest(
                "entropy needs top_logprobs_k >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt: PromptVariant,
    pub decoding: Decoding,
    /// Sampling seed; only the simulated backend uses it, but it is part of
    /// the cache key for every backend.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    /// Top alternatives for the first generated token, sorted by descending
    /// log-probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_token_logprobs: Option<Vec<TokenLogprob>>,
    pub latency_ms: u64,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ModelResponse {
    /// Checks that logprobs are finite, non-positive and sorted.
    pub fn check_logprobs(&self) -> Result<(), BackendError> {
        let Some(lps) = &self.answer_token_logprobs else {
            return Ok(());
        };
        for lp in lps {
            if !lp.logprob.is_finite() || lp.logprob > 0.0 {
                return Err(BackendError::Protocol(format!(
                    "logprob {} for token {:?} is not a finite non-positive number",
                    lp.logprob, lp.token
                )));
            }
        }
        if lps.windows(2).any(|w| w[0].logprob < w[1].logprob) {
            return Err(BackendError::Protocol("logprobs not sorted".into()));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (**self).query(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (**self).query(request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (**self).query(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            initial_backoff: Duration::ZERO,
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << attempt.min(16))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Retries transport failures with exponential backoff.
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let mut attempt = 0;
        loop {
            match self.inner.query(request) {
                Err(e) if e.is_retryable() && attempt < self.policy.max_retries => {
                    let wait = self.policy.backoff(attempt);
                    log::warn!("{e}; retry {} in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counts calls and token usage reaching the wrapped backend.
pub struct Counting<B> {
    inner: B,
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl<B: Backend> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.query(request)?;
        if let Some(usage) = response.usage {
            self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
            self.completion_tokens
                .fetch_add(usage.completion_tokens, Ordering::Relaxed);
        }
        Ok(response)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|p| p.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|p| p.into_inner());
        }
        *available -= 1;
        InFlightPermit { limit: self }
    }
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut available = self.limit.available.lock().unwrap_or_else(|p| p.into_inner());
        *available += 1;
        self.limit.freed.notify_one();
    }
}
