//! Chat-completion backends: a remote OpenAI-compatible endpoint, a seeded
//! deterministic mock, and a content-addressed disk cache that wraps
//! either. All share one synchronous [`Backend`] trait; within-run
//! parallelism is a caller concern (the remote transport bounds in-flight
//! requests itself).

pub mod cache;
pub mod mock;
pub mod remote;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ChatMessage, Decision};

pub use cache::CachedBackend;
pub use mock::{MockBackend, MockScript};
pub use remote::{RemoteBackend, RemoteConfig};

/// What a request is for. Drives mock scripting and is recorded in cache
/// keys; the remote wire body never includes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    Decision,
    ElementRationale,
    Summarization,
    Adjudication,
    RubricCompile,
    ScoreSum,
    Other,
}

/// Structured request context: the response, element, and decision-prefix
/// a request concerns. The mock partitions its random streams by these
/// fields so concurrency cannot change sampled outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub class: RequestClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u32>,
}

impl RequestMeta {
    pub fn class(class: RequestClass) -> Self {
        RequestMeta {
            class,
            response_id: None,
            element_id: None,
            prefix: None,
            decision: None,
            score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub n: u32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    pub meta: RequestMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub texts: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend refused the content: {0}")]
    Refusal(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport failure after retries: {0}")]
    Transport(String),
    #[error("token budget exhausted: used {used} of {budget}")]
    BudgetExceeded { used: u64, budget: u64 },
}

/// Cumulative billed token totals for a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Per-1K-token prices used for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable {
            input_per_1k: 0.01,
            output_per_1k: 0.03,
        }
    }
}

/// Linear cost of a token total under a price table.
pub fn estimate_cost(usage: TokenUsage, price: PriceTable) -> f64 {
    usage.prompt_tokens as f64 / 1000.0 * price.input_per_1k
        + usage.completion_tokens as f64 / 1000.0 * price.output_per_1k
}

pub trait Backend: Send + Sync {
    /// Stable identifier entering cache keys ("mock", "remote").
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
    /// Transport invocations so far (cache hits never increment this).
    fn calls(&self) -> u64;
    /// Billed token totals so far.
    fn usage(&self) -> TokenUsage;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
    fn usage(&self) -> TokenUsage {
        (**self).usage()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
    fn usage(&self) -> TokenUsage {
        (**self).usage()
    }
}

/// Shared call/usage counters with an optional hard token budget.
#[derive(Debug)]
pub struct UsageMeter {
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    budget: Option<u64>,
}

impl UsageMeter {
    pub fn new(budget: Option<u64>) -> Self {
        UsageMeter {
            calls: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
            budget,
        }
    }

    /// Gate a call: errors once the budget is spent.
    pub fn check_budget(&self) -> Result<(), BackendError> {
        if let Some(budget) = self.budget {
            let used = self.usage().total();
            if used >= budget {
                return Err(BackendError::BudgetExceeded { used, budget });
            }
        }
        Ok(())
    }

    pub fn record(&self, prompt_tokens: u64, completion_tokens: u64) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.prompt_tokens.fetch_add(prompt_tokens, Ordering::Relaxed);
        self.completion_tokens
            .fetch_add(completion_tokens, Ordering::Relaxed);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn usage(&self) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

/// Default substrings treated as content-filter refusals when they appear
/// in completion text.
pub const DEFAULT_REFUSAL_MARKERS: &[&str] = &[
    "i cannot assist",
    "i can't assist",
    "content management policy",
    "[refused]",
];

pub(crate) fn detect_refusal(texts: &[String], markers: &[String]) -> Option<String> {
    for text in texts {
        let lower = text.to_lowercase();
        for marker in markers {
            if lower.contains(marker.to_lowercase().as_str()) {
                return Some(format!("refusal marker '{marker}' in completion"));
            }
        }
    }
    None
}

pub(crate) fn validate_request(request: &ChatRequest) -> Result<(), BackendError> {
    if request.messages.is_empty() {
        return Err(BackendError::InvalidRequest("messages must be non-empty".into()));
    }
    if request.n == 0 {
        return Err(BackendError::InvalidRequest("n must be >= 1".into()));
    }
    Ok(())
}

/// Rough token estimate for backends that do not report usage:
/// whitespace word count scaled by 1.3.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.split_whitespace().count() as f64 * 1.3).round() as u64
}

/// Minimal counting semaphore bounding in-flight remote requests.
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().unwrap();
        *permits += 1;
        self.sem.cv.notify_one();
    }
}
