//! Chat-completion client for OpenAI-compatible endpoints.

use std::thread;
use std::time::{Duration, Instant};

use dytag_core::llm::{BackendKind, ChatBackend, ChatRequest, ChatResponse, GatewayError};
use serde_json::{json, Value};

pub const API_KEY_VAR: &str = "LLM_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { initial: Duration::from_millis(500), max: Duration::from_secs(8) }
    }
}

impl Backoff {
    /// Delay before attempt `attempt + 1`, doubling from `initial` and capped at `max`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

#[derive(Clone, Debug)]
pub struct HttpSettings {
    /// Base URL; `/v1/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub api_key: String,
    pub max_attempts: u32,
    pub backoff: Backoff,
    pub timeout: Duration,
}

impl HttpSettings {
    /// Reads the credential from the environment.
    pub fn from_env(endpoint: &str) -> Result<HttpSettings, GatewayError> {
        let api_key = std::env::var(API_KEY_VAR)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::Config(format!("environment variable {} is not set", API_KEY_VAR)))?;
        Ok(HttpSettings {
            endpoint: endpoint.to_owned(),
            api_key,
            max_attempts: 3,
            backoff: Backoff::default(),
            timeout: Duration::from_secs(120),
        })
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    settings: HttpSettings,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("url", &self.url).field("max_attempts", &self.settings.max_attempts).finish()
    }
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<HttpBackend, GatewayError> {
        if settings.max_attempts == 0 {
            return Err(GatewayError::Config("max_attempts must be at least 1".into()));
        }
        let base = settings.endpoint.trim_end_matches('/');
        if base.is_empty() {
            return Err(GatewayError::Config("empty endpoint".into()));
        }
        let url = if base.ends_with("/chat/completions") { base.to_owned() } else { format!("{}/v1/chat/completions", base) };
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {}", e)))?;
        Ok(HttpBackend { client, url, settings })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let resp = self.client.post(&self.url).bearer_auth(&self.settings.api_key).json(body).send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                Failure::Retry(e.to_string())
            } else {
                Failure::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retry(format!("reading body: {}", e)))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retry(format!("HTTP {}", status)));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("HTTP {}: {}", status, text.chars().take(200).collect::<String>())));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("response is not JSON: {}", e)))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Failure::Fatal("response lacks choices[0].message.content".into()))
    }
}

impl ChatBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.settings.max_attempts {
            match self.attempt(&body) {
                Ok(content) => {
                    return Ok(ChatResponse { content, latency_ms: start.elapsed().as_millis() as u64, backend: BackendKind::Http })
                }
                Err(Failure::Fatal(message)) => return Err(GatewayError::Transport { attempts: attempt, message }),
                Err(Failure::Retry(message)) => {
                    log::warn!("attempt {}/{} failed: {}", attempt, self.settings.max_attempts, message);
                    last = message;
                    if attempt < self.settings.max_attempts {
                        thread::sleep(self.settings.backoff.delay(attempt));
                    }
                }
            }
        }
        Err(GatewayError::Transport { attempts: self.settings.max_attempts, message: last })
    }
}
