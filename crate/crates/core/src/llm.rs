//! Chat-completion backends.
//!
//! Three interchangeable implementations of [`ChatBackend`]:
//!
//! - [`HttpBackend`] posts to `{base_url}/chat/completions` using the common
//!   chat-completions JSON shape.
//! - [`ScriptedBackend`] pops canned responses from a JSON Lines fixture, for
//!   hermetic tests and demos.
//! - [`ReplayBackend`] caches responses on disk keyed by a SHA-256 of the
//!   canonical request, delegating misses to a wrapped backend.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::react::{ChatMessage, Role};
use crate::ErrorCode;

pub const DEFAULT_API_KEY_ENV: &str = "AUTOML_GPT_API_KEY";
pub const BASE_URL_ENV: &str = "AUTOML_GPT_BASE_URL";
const SNIPPET_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("http status {status}: {body_snippet}")]
    Http { status: u16, body_snippet: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("fixture exhausted")]
    FixtureExhausted,
    #[error("fixture expected {expected:?} in last user message, got {got_snippet:?}")]
    FixtureMismatch { expected: String, got_snippet: String },
    #[error("no cached response for request {key}")]
    CacheMiss { key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    BadResponse(String),
}

impl ErrorCode for LlmError {
    fn code(&self) -> &'static str {
        match self {
            LlmError::Http { .. } => "E_HTTP",
            LlmError::Timeout => "E_TIMEOUT",
            LlmError::Transport(_) => "E_TRANSPORT",
            LlmError::FixtureExhausted => "E_FIXTURE_EXHAUSTED",
            LlmError::FixtureMismatch { .. } => "E_FIXTURE_MISMATCH",
            LlmError::CacheMiss { .. } => "E_CACHE_MISS",
            LlmError::InvalidRequest(_) => "E_INVALID_REQUEST",
            LlmError::Config(_) => "E_BACKEND_CONFIG",
            LlmError::Io(_) => "E_IO",
            LlmError::BadResponse(_) => "E_BAD_RESPONSE",
        }
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(SNIPPET_CHARS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages, temperature: 0.0, max_tokens: 1024, stop: vec!["Observation:".to_string()] }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => return Err(LlmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => {
                return Err(LlmError::InvalidRequest("first message must be a system message".into()))
            }
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest("temperature must be a finite value >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if let Some(m) = self.messages.iter().find(|m| !m.is_valid()) {
            return Err(LlmError::InvalidRequest(format!("blank {:?} message", m.role)));
        }
        Ok(())
    }

    /// Content of the most recent user message, or "" if there is none.
    pub fn last_user_message(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }

    /// Compact JSON with keys in sorted order and no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        // serde_json's Map is a BTreeMap here (no preserve_order), so keys serialize sorted.
        let v = json!({
            "max_tokens": self.max_tokens,
            "messages": self.messages.iter().map(|m| json!({"content": m.content, "role": m.role})).collect::<Vec<_>>(),
            "stop": self.stop,
            "temperature": self.temperature,
        });
        serde_json::to_string(&v).expect("request serializes")
    }

    pub fn cache_key(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub fixture_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// Wrapped backend for replay misses; `None` means strict replay.
    pub inner: Option<Box<BackendConfig>>,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            base_url: None,
            model: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            fixture_path: None,
            cache_dir: None,
            inner: None,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

impl BackendConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self { kind: BackendKind::Scripted, fixture_path: Some(path.into()), ..Self::default() }
    }

    pub fn http(model: &str) -> Self {
        Self {
            kind: BackendKind::Http,
            model: Some(model.to_string()),
            base_url: Some("https://api.openai.com/v1".to_string()),
            ..Self::default()
        }
    }

    /// Parses `scripted:<path>`, `http:<model>` or `replay:<dir>+http:<model>`.
    /// `replay:<dir>` alone is strict replay.
    pub fn parse_spec(spec: &str) -> Result<Self, LlmError> {
        if let Some(path) = spec.strip_prefix("scripted:") {
            if path.is_empty() {
                return Err(LlmError::Config("scripted backend needs a fixture path".into()));
            }
            return Ok(Self::scripted(path));
        }
        if let Some(model) = spec.strip_prefix("http:") {
            if model.is_empty() {
                return Err(LlmError::Config("http backend needs a model name".into()));
            }
            return Ok(Self::http(model));
        }
        if let Some(rest) = spec.strip_prefix("replay:") {
            let (dir, inner) = match rest.split_once('+') {
                Some((dir, inner)) => (dir, Some(Box::new(Self::parse_spec(inner)?))),
                None => (rest, None),
            };
            if dir.is_empty() {
                return Err(LlmError::Config("replay backend needs a cache directory".into()));
            }
            return Ok(Self { kind: BackendKind::Replay, cache_dir: Some(dir.into()), inner, ..Self::default() });
        }
        Err(LlmError::Config(format!(
            "unrecognized backend spec {spec:?}; expected scripted:<path>, http:<model> or replay:<dir>+http:<model>"
        )))
    }

    pub fn build(&self) -> Result<Box<dyn ChatBackend>, LlmError> {
        match self.kind {
            BackendKind::Scripted => {
                let path = self.fixture_path.as_ref().ok_or_else(|| LlmError::Config("missing fixture_path".into()))?;
                Ok(Box::new(ScriptedBackend::from_path(path)?))
            }
            BackendKind::Http => Ok(Box::new(HttpBackend::from_config(self)?)),
            BackendKind::Replay => {
                let dir = self.cache_dir.as_ref().ok_or_else(|| LlmError::Config("missing cache_dir".into()))?;
                let inner = match &self.inner {
                    Some(c) => Some(c.build()?),
                    None => None,
                };
                Ok(Box::new(ReplayBackend::new(dir, inner)?))
            }
        }
    }

    /// True when completions come from a fixture or a strict cache, i.e. runs are hermetic.
    pub fn is_hermetic(&self) -> bool {
        match self.kind {
            BackendKind::Scripted => true,
            BackendKind::Http => false,
            BackendKind::Replay => self.inner.is_none(),
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted fixture

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, rename = "expect", skip_serializing_if = "Option::is_none")]
    pub expect_substring: Option<String>,
    pub response: String,
}

/// Canned completions consumed strictly in order, each at most once.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Mutex<VecDeque<FixtureEntry>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        Self { entries: Mutex::new(entries.into()) }
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn parse_jsonl(text: &str) -> Result<Vec<FixtureEntry>, LlmError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LlmError::Config(format!("fixture line {}: {e}", i + 1)))
            })
            .collect()
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        Ok(Self::new(Self::parse_jsonl(&text)?))
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().expect("fixture lock").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut entries = self.entries.lock().expect("fixture lock");
        let next = entries.front().ok_or(LlmError::FixtureExhausted)?;
        if let Some(expected) = &next.expect_substring {
            let got = request.last_user_message();
            if !got.contains(expected.as_str()) {
                return Err(LlmError::FixtureMismatch { expected: expected.clone(), got_snippet: snippet(got) });
            }
        }
        Ok(entries.pop_front().expect("checked non-empty").response)
    }
}

// ---------------------------------------------------------------------------
// Replay cache

pub struct ReplayBackend {
    dir: PathBuf,
    inner: Option<Box<dyn ChatBackend>>,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>, inner: Option<Box<dyn ChatBackend>>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, inner })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        let path = self.entry_path(&key);
        match fs::read_to_string(&path) {
            Ok(text) => return Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let inner = self.inner.as_ref().ok_or(LlmError::CacheMiss { key: key.clone() })?;
        let text = inner.complete(request)?;
        let tmp = self.dir.join(format!(".{key}.tmp.{}", std::process::id()));
        fs::write(&tmp, &text)?;
        fs::rename(&tmp, &path)?;
        Ok(text)
    }
}

// ---------------------------------------------------------------------------
// HTTP

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, LlmError> {
        let base = std::env::var(BASE_URL_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .or_else(|| config.base_url.clone())
            .ok_or_else(|| LlmError::Config("http backend needs base_url".into()))?;
        let model = config.model.clone().ok_or_else(|| LlmError::Config("http backend needs model".into()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|v| !v.is_empty());
        Ok(Self::new(&base, &model, api_key, Duration::from_secs(config.timeout_secs), config.retries))
    }

    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            retries,
        }
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.model,
            "messages": request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stop": request.stop,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(serde_json::to_vec(body).expect("json body").as_slice()).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Http { status, body_snippet: snippet(&text) });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse(format!("no choices[0].message.content in {}", snippet(&text))))
    }
}

fn map_ureq(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        other => LlmError::Transport(other.to_string()),
    }
}

fn is_retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Transport(_) | LlmError::Timeout => true,
        LlmError::Http { status, .. } => *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = self.request_body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if is_retryable(&e) && attempt < self.retries => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %e, "retrying chat completion");
                    std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                }
                Err(e) => return Err(e),
            }
        }
    }
}
