//! Chat-completion gateway.
//!
//! [`LlmClient`] wraps any [`Backend`] with a persistent response cache and
//! retry with exponential backoff. Backends report the answer-position top
//! token log-probabilities, which [`extract_answer`] turns into a binary
//! label and a probability.

mod cache;
mod extract;
mod mock;
mod remote;

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use extract::{extract_answer, split_reasoning, ExtractedAnswer, FALLBACK_EPSILON};
pub use mock::{MockBackend, MockRule, MockScript, RuleKind};
pub use remote::{RemoteBackend, API_BASE_ENV, API_KEY_ENV};

use crate::prompt::PromptText;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    #[serde(default)]
    pub seed_hint: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt: PromptText) -> Self {
        CompletionRequest {
            model_id: model_id.into(),
            prompt,
            temperature: 0.0,
            max_tokens: 512,
            top_logprobs: 5,
            seed_hint: None,
        }
    }

    /// Content address of the request: model, prompt hash and sampling settings.
    pub fn cache_key(&self) -> String {
        crate::util::sha256_hex(&[
            self.model_id.as_bytes(),
            self.prompt.prompt_hash.as_bytes(),
            &self.temperature.to_le_bytes(),
            &self.max_tokens.to_le_bytes(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// Top alternatives at the answer token, as `(token, log-probability)`.
    pub answer_token_logprobs: Vec<(String, f64)>,
    pub backend_id: String,
    pub cached: bool,
    /// Backend attempts used; 0 when served from the cache.
    #[serde(default)]
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    /// Worth retrying: network trouble, rate limits, server errors.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock script has no rule for prompt {prompt_hash}")]
    ScriptMiss { prompt_hash: String },
    #[error("backend failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("cache error: {0}")]
    Cache(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    /// Each delay is scaled by a random factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1000,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            jitter: 0.0,
        }
    }

    pub fn delay(&self, failed_attempts: u32) -> Duration {
        if self.base_delay_ms == 0 {
            return Duration::ZERO;
        }
        let exp = self.base_delay_ms.saturating_mul(1u64 << failed_attempts.saturating_sub(1).min(20));
        let factor = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_millis((exp as f64 * factor) as u64)
    }
}

/// A backend plus cache and retry behavior.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        LlmClient {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Cache lookup, then the backend with retries. Only transient errors
    /// are retried; successful responses are written to the cache.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(request)? {
                hit.cached = true;
                hit.attempts = 0;
                return Ok(hit);
            }
        }
        let resp = self.call_with_retry(request)?;
        if let Some(cache) = &self.cache {
            cache.put(request, &resp)?;
        }
        Ok(resp)
    }

    /// Like [`complete`](Self::complete) but never reads the cache.
    pub fn complete_fresh(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let resp = self.call_with_retry(request)?;
        if let Some(cache) = &self.cache {
            cache.put(request, &resp)?;
        }
        Ok(resp)
    }

    fn call_with_retry(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let max = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.backend.call(request) {
                Ok(mut resp) => {
                    resp.cached = false;
                    resp.attempts = attempt;
                    return Ok(resp);
                }
                Err(LlmError::Transient(msg)) => {
                    log::debug!("attempt {attempt}/{max} on {} failed: {msg}", self.backend.id());
                    last = msg;
                    if attempt < max {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(LlmError::Exhausted { attempts: max, last })
    }
}
