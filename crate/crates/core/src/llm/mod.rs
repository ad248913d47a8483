//! Chat-completion requests, backends, transcripts and the calling gateway.
//!
//! Backends are interchangeable behind [`ChatBackend`]: the scripted mock and
//! the transcript replayer live here, the HTTP client lives in the `dytag`
//! crate. Every call made through a [`Gateway`] is appended to its transcript
//! sink, keyed by a digest of the canonicalized request.

mod mock;
mod parse;

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{heuristic_rules, HeuristicAgent, Matcher, PromptFacts, PromptKind, Responder, Rule, ScriptedBackend};
pub use parse::{extract_json_object, parse_ordered_map, parse_structured, Field, Kind, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub expect_structured: bool,
}

impl ChatRequest {
    /// Concatenated message contents, the text mock matchers look at.
    pub fn prompt_text(&self) -> String {
        let parts: Vec<&str> = self.messages.iter().map(|m| m.content.as_str()).collect();
        parts.join("\n\n")
    }

    /// Stable SHA-256 over model, normalized messages, temperature and max_tokens.
    pub fn digest(&self) -> String {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| {
                let mut obj = serde_json::Map::new();
                obj.insert("content".into(), serde_json::Value::String(normalize_whitespace(&m.content)));
                obj.insert("role".into(), serde_json::to_value(m.role).unwrap_or_default());
                serde_json::Value::Object(obj)
            })
            .collect();
        let mut canon = serde_json::Map::new();
        canon.insert("max_tokens".into(), self.max_tokens.into());
        canon.insert("messages".into(), serde_json::Value::Array(messages));
        canon.insert("model".into(), self.model.clone().into());
        canon.insert("temperature".into(), canonical_number(self.temperature));
        // serde_json's default map is ordered by key, so the encoding is canonical
        let bytes = serde_json::to_vec(&serde_json::Value::Object(canon)).unwrap_or_default();
        hex::encode(Sha256::digest(&bytes))
    }
}

fn canonical_number(x: f64) -> serde_json::Value {
    if x == (x as i64) as f64 {
        serde_json::Value::from(x as i64)
    } else {
        serde_json::Value::from(x)
    }
}

/// CRLF to LF, trailing whitespace stripped per line, outer whitespace trimmed.
pub fn normalize_whitespace(text: &str) -> String {
    let unified = text.replace("\r\n", "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim().to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
    Replay,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
            BackendKind::Replay => "replay",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    /// Milliseconds since the Unix epoch; zero when no clock is available.
    pub wall_time: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("replay miss: no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("mock miss: no scripted rule matches request {digest}")]
    MockMiss { digest: String },
    #[error("structured parse failure: {message}")]
    Parse { message: String, raw: String },
    #[error("transcript write failed: {0}")]
    Transcript(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

pub trait TranscriptSink: Send + Sync {
    fn append(&self, record: &TranscriptRecord) -> Result<(), GatewayError>;
}

/// Answers from a recorded transcript, keyed by request digest.
///
/// Repeated digests replay the first recording; with deterministic decoding
/// identical requests carry identical content.
#[derive(Clone, Debug, Default)]
pub struct ReplayBackend {
    recordings: BTreeMap<String, ChatResponse>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut recordings = BTreeMap::new();
        for r in records {
            recordings.entry(r.request_digest).or_insert(r.response);
        }
        ReplayBackend { recordings }
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        match self.recordings.get(&digest) {
            Some(r) => Ok(ChatResponse { content: r.content.clone(), latency_ms: 0, backend: BackendKind::Replay }),
            None => Err(GatewayError::ReplayMiss { digest }),
        }
    }
}

/// Sampling settings shared by every agent call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings { model: "mock-heuristic".into(), temperature: 0.0, max_tokens: 1024 }
    }
}

/// A structured reply together with the digests of every call it took.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredReply {
    pub value: serde_json::Value,
    pub digests: Vec<String>,
}

pub const REASK_MESSAGE: &str = "Respond with only the JSON object.";

/// Backend + transcript + settings; the single path through which agents call models.
#[derive(Clone, Copy)]
pub struct Gateway<'a> {
    pub backend: &'a dyn ChatBackend,
    pub transcript: Option<&'a dyn TranscriptSink>,
    pub clock: Option<&'a (dyn Fn() -> u64 + Sync)>,
    pub settings: &'a GenerationSettings,
}

impl<'a> Gateway<'a> {
    pub fn new(backend: &'a dyn ChatBackend, settings: &'a GenerationSettings) -> Self {
        Gateway { backend, transcript: None, clock: None, settings }
    }

    pub fn with_transcript(mut self, sink: &'a dyn TranscriptSink) -> Self {
        self.transcript = Some(sink);
        self
    }

    pub fn with_clock(mut self, clock: &'a (dyn Fn() -> u64 + Sync)) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn request(&self, messages: Vec<ChatMessage>, expect_structured: bool) -> ChatRequest {
        ChatRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
            expect_structured,
        }
    }

    /// One logical call: backend completion plus one transcript record.
    pub fn send(&self, request: &ChatRequest) -> Result<(ChatResponse, String), GatewayError> {
        let digest = request.digest();
        let response = self.backend.complete(request)?;
        if let Some(sink) = self.transcript {
            let record = TranscriptRecord {
                request_digest: digest.clone(),
                request: request.clone(),
                response: response.clone(),
                wall_time: self.clock.map(|c| c()).unwrap_or(0),
            };
            sink.append(&record)?;
        }
        Ok((response, digest))
    }

    pub fn complete(&self, messages: Vec<ChatMessage>) -> Result<(ChatResponse, String), GatewayError> {
        self.send(&self.request(messages, false))
    }

    /// Completes and parses against `schema`, re-asking once on a malformed reply.
    pub fn complete_structured(&self, messages: Vec<ChatMessage>, schema: &Schema) -> Result<StructuredReply, GatewayError> {
        let attempted = self.complete_typed(messages, schema, Ok)?;
        attempted.outcome.map(|value| StructuredReply { value, digests: attempted.digests })
    }

    /// Like [`Gateway::complete_structured`], with a conversion step whose
    /// failure also counts as malformed and triggers the single re-ask.
    ///
    /// Transport-level failures are returned as `Err`; a reply that stays
    /// malformed after the re-ask comes back as a parse error inside
    /// [`Attempted`] together with the digests of both calls.
    pub fn complete_typed<T>(
        &self,
        messages: Vec<ChatMessage>,
        schema: &Schema,
        convert: impl Fn(serde_json::Value) -> Result<T, String>,
    ) -> Result<Attempted<T>, GatewayError> {
        let attempt = |content: &str| -> Result<T, GatewayError> {
            let value = parse_structured(content, schema)?;
            convert(value).map_err(|message| GatewayError::Parse { message, raw: content.to_owned() })
        };
        let first = self.request(messages, true);
        let (response, digest) = self.send(&first)?;
        let mut digests = alloc::vec![digest];
        let outcome = match attempt(&response.content) {
            Ok(v) => Ok(v),
            Err(first_err) => {
                log::debug!("re-asking after parse failure: {}", first_err);
                let mut retry = first;
                retry.messages.push(ChatMessage::user(REASK_MESSAGE));
                let (response, digest) = self.send(&retry)?;
                digests.push(digest);
                attempt(&response.content)
            }
        };
        Ok(Attempted { outcome, digests })
    }
}

/// Result of a structured call plus the digests of every request it made.
#[derive(Clone, Debug, PartialEq)]
pub struct Attempted<T> {
    pub outcome: Result<T, GatewayError>,
    pub digests: Vec<String>,
}

impl fmt::Debug for Gateway<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.kind())
            .field("transcript", &self.transcript.is_some())
            .field("settings", self.settings)
            .finish()
    }
}

/// Collects transcript records in memory.
#[cfg(feature = "std")]
#[derive(Debug, Default)]
pub struct MemoryTranscript {
    records: std::sync::Mutex<Vec<TranscriptRecord>>,
}

#[cfg(feature = "std")]
impl MemoryTranscript {
    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().map(|r| r.clone()).unwrap_or_default()
    }
}

#[cfg(feature = "std")]
impl TranscriptSink for MemoryTranscript {
    fn append(&self, record: &TranscriptRecord) -> Result<(), GatewayError> {
        self.records.lock().map_err(|e| GatewayError::Transcript(alloc::format!("{e}")))?.push(record.clone());
        Ok(())
    }
}
