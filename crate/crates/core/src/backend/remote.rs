//! OpenAI-compatible remote backend over `POST {base_url}/v1/chat/completions`.
//!
//! The credential comes only from the `LLM_API_KEY` environment variable
//! and the base URL from `LLM_BASE_URL` or the config; neither is ever
//! logged. Transient failures (connect/timeout/429/5xx) retry up to three
//! times with exponential backoff. Non-retryable 4xx responses surface the
//! body; content-filter refusals map to their own error class so callers
//! can skip a response instead of aborting the run.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    detect_refusal, validate_request, Backend, BackendError, ChatRequest, Completion, Semaphore,
    TokenUsage, UsageMeter, DEFAULT_REFUSAL_MARKERS,
};
use crate::domain::ChatMessage;

pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const BASE_URL_ENV: &str = "LLM_BASE_URL";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Used when `LLM_BASE_URL` is unset.
    pub base_url: Option<String>,
    pub model: String,
    /// Whether one request may carry n > 1 candidates; otherwise n
    /// sequential single-candidate requests are issued.
    pub supports_multi_candidate: bool,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub token_budget: Option<u64>,
    pub refusal_markers: Option<Vec<String>>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: None,
            model: "gpt-4-1106-preview".into(),
            supports_multi_candidate: true,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 250,
            timeout_secs: 120,
            token_budget: None,
            refusal_markers: None,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    n: u32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
    meter: UsageMeter,
    gate: Semaphore,
    markers: Vec<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            BackendError::Configuration(format!("credential missing: set {API_KEY_ENV}"))
        })?;
        let base_url = std::env::var(BASE_URL_ENV)
            .ok()
            .or_else(|| config.base_url.clone())
            .ok_or_else(|| {
                BackendError::Configuration(format!(
                    "no base URL: set {BASE_URL_ENV} or backend.base_url"
                ))
            })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Configuration(e.to_string()))?;
        let markers = config
            .refusal_markers
            .clone()
            .unwrap_or_else(|| DEFAULT_REFUSAL_MARKERS.iter().map(|s| s.to_string()).collect());
        Ok(RemoteBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            gate: Semaphore::new(config.max_in_flight),
            meter: UsageMeter::new(config.token_budget),
            api_key,
            client,
            markers,
            config,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<WireResponse, RetryOutcome> {
        let _permit = self.gate.acquire();
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| RetryOutcome::Transient(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| RetryOutcome::Transient(e.to_string()))?;
        if status.is_success() {
            serde_json::from_str(&text)
                .map_err(|e| RetryOutcome::Fatal(BackendError::Transport(format!(
                    "unparseable response body: {e}"
                ))))
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(RetryOutcome::Transient(format!("http {status}")))
        } else {
            let lower = text.to_lowercase();
            if lower.contains("content_filter") || lower.contains("content management policy") {
                Err(RetryOutcome::Fatal(BackendError::Refusal(format!(
                    "content policy rejection (http {status})"
                ))))
            } else {
                Err(RetryOutcome::Fatal(BackendError::Http {
                    status: status.as_u16(),
                    body: text,
                }))
            }
        }
    }

    fn post_with_retry(&self, body: &serde_json::Value) -> Result<WireResponse, BackendError> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            match self.post_once(body) {
                Ok(response) => return Ok(response),
                Err(RetryOutcome::Fatal(e)) => return Err(e),
                Err(RetryOutcome::Transient(msg)) => {
                    last = msg;
                    if attempt < self.config.max_retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(BackendError::Transport(last))
    }

    fn issue(&self, request: &ChatRequest, n: u32) -> Result<Completion, BackendError> {
        self.meter.check_budget()?;
        let body = serde_json::to_value(WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.temperature,
            n,
            max_tokens: request.max_tokens,
            stop: request.stop.as_deref(),
        })
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let wire = self.post_with_retry(&body)?;

        let refused = wire
            .choices
            .iter()
            .any(|c| c.finish_reason.as_deref() == Some("content_filter"));
        if refused {
            return Err(BackendError::Refusal("finish_reason content_filter".into()));
        }
        let texts: Vec<String> = wire.choices.into_iter().map(|c| c.message.content).collect();
        if texts.len() != n as usize {
            return Err(BackendError::Transport(format!(
                "requested {n} candidates, got {}",
                texts.len()
            )));
        }
        let usage = wire.usage.unwrap_or_default();
        self.meter.record(usage.prompt_tokens, usage.completion_tokens);
        if let Some(reason) = detect_refusal(&texts, &self.markers) {
            return Err(BackendError::Refusal(reason));
        }
        Ok(Completion {
            texts,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            cached: false,
        })
    }
}

enum RetryOutcome {
    Transient(String),
    Fatal(BackendError),
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        validate_request(request)?;
        if self.config.supports_multi_candidate || request.n == 1 {
            self.issue(request, request.n)
        } else {
            let mut texts = Vec::with_capacity(request.n as usize);
            let mut prompt_tokens = 0;
            let mut completion_tokens = 0;
            for _ in 0..request.n {
                let one = self.issue(request, 1)?;
                texts.extend(one.texts);
                prompt_tokens += one.prompt_tokens;
                completion_tokens += one.completion_tokens;
            }
            Ok(Completion {
                texts,
                prompt_tokens,
                completion_tokens,
                cached: false,
            })
        }
    }

    fn calls(&self) -> u64 {
        self.meter.calls()
    }

    fn usage(&self) -> TokenUsage {
        self.meter.usage()
    }
}
