//! Chat-completion backends behind one trait, plus retry and usage accounting.
//!
//! Backends are registered by name (`http`, `scripted`, `cassette`) and
//! selected at run time from a [`BackendConfig`].

mod cassette;
mod http;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{CassetteEntry, CassetteMode, CassetteBackend};
pub use http::{HttpBackend, API_KEY_ENV, BASE_URL_ENV};
pub use scripted::{ScriptedBackend, ScriptedReply};

/// Which step of which method issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Extract,
    Infer,
    Refine,
    Manager,
    CoaWorker,
    TcDirect,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Planner,
        Role::Extract,
        Role::Infer,
        Role::Refine,
        Role::Manager,
        Role::CoaWorker,
        Role::TcDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Planner => "planner",
            Role::Extract => "extract",
            Role::Infer => "infer",
            Role::Refine => "refine",
            Role::Manager => "manager",
            Role::CoaWorker => "coa_worker",
            Role::TcDirect => "tc_direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).unwrap()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_output_tokens: usize,
    pub role: Role,
}

impl LlmRequest {
    /// sha256 over role, model and user prompt. System text is not part of it.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.as_str().as_bytes());
        h.update([0u8]);
        h.update(self.model.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {message}")]
    Provider { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("cassette mismatch at entry {index}: expected {expected}, request has {actual}")]
    CassetteMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("cassette exhausted after {0} entries")]
    CassetteExhausted(usize),
    #[error("scripted backend has no reply left for role {0}")]
    ScriptExhausted(Role),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Provider { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A chat-completion provider.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Default)]
struct RoleCounter {
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

/// Exact per-role call and token totals.
#[derive(Debug, Default)]
pub struct UsageCounters {
    roles: [RoleCounter; 7],
    retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageCounters {
    fn record(&self, role: Role, response: &LlmResponse) {
        let c = &self.roles[role.index()];
        c.calls.fetch_add(1, Ordering::Relaxed);
        c.prompt_tokens.fetch_add(response.prompt_tokens as u64, Ordering::Relaxed);
        c.completion_tokens.fetch_add(response.completion_tokens as u64, Ordering::Relaxed);
    }

    pub fn role(&self, role: Role) -> RoleUsage {
        let c = &self.roles[role.index()];
        RoleUsage {
            calls: c.calls.load(Ordering::Relaxed),
            prompt_tokens: c.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: c.completion_tokens.load(Ordering::Relaxed),
        }
    }

    pub fn total_calls(&self) -> u64 {
        Role::ALL.iter().map(|&r| self.role(r).calls).sum()
    }

    /// Transport-level retries (not visible to the pipeline).
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

/// A backend plus retry policy and usage counters.
///
/// Retries happen below the pipeline: each [`LlmClient::complete`] yields
/// exactly one response or one error.
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    retry: RetryPolicy,
    usage: UsageCounters,
    sleep: fn(Duration),
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            usage: UsageCounters::default(),
            sleep: std::thread::sleep,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Replaces the backoff sleep, for tests.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    pub fn usage(&self) -> &UsageCounters {
        &self.usage
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let mut attempt = 0;
        loop {
            match self.backend.complete(request) {
                Ok(response) => {
                    self.usage.record(request.role, &response);
                    return Ok(response);
                }
                Err(err) if err.is_retryable() && attempt < self.retry.max_retries => {
                    log::warn!("{} call failed ({err}); retry {}", request.role, attempt + 1);
                    self.usage.retries.fetch_add(1, Ordering::Relaxed);
                    (self.sleep)(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Backend selection, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http {
        base_url: Option<String>,
        #[serde(default)]
        eager_check: bool,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
    Scripted {
        path: std::path::PathBuf,
    },
    Cassette {
        path: std::path::PathBuf,
        mode: CassetteMode,
        /// Backend used to fill the cassette in record mode.
        #[serde(default)]
        inner: Option<Box<BackendConfig>>,
    },
}

fn default_timeout_secs() -> u64 {
    300
}

pub const BACKEND_NAMES: [&str; 3] = ["http", "scripted", "cassette"];

/// Builds the backend named by `config`.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn LlmBackend>, LlmError> {
    Ok(match config {
        BackendConfig::Http {
            base_url,
            eager_check,
            timeout_secs,
        } => {
            let backend = HttpBackend::from_env(base_url.as_deref(), Duration::from_secs(*timeout_secs))?;
            if *eager_check {
                backend.check()?;
            }
            Arc::new(backend)
        }
        BackendConfig::Scripted { path } => Arc::new(ScriptedBackend::from_jsonl(path)?),
        BackendConfig::Cassette { path, mode, inner } => match mode {
            CassetteMode::Replay => Arc::new(CassetteBackend::replay(path)?),
            CassetteMode::Record => {
                let inner = inner
                    .as_deref()
                    .ok_or_else(|| LlmError::Config("record mode needs an inner backend".into()))?;
                Arc::new(CassetteBackend::record(path, build_backend(inner)?)?)
            }
        },
    })
}
