//! Single chokepoint for all chat-completion traffic.
//!
//! Every LLM call in the pipeline goes through [`Gateway::complete`]:
//! requests are canonicalized and keyed, responses are cached append-only
//! on disk, misses are retried with exponential backoff, and batches run
//! on a bounded worker pool. With a warm cache a rerun performs zero
//! backend calls, which is what makes pipeline stages replayable.

mod cache;
pub mod http;
pub mod mock;

pub use http::HttpBackend;
pub use mock::{
    length_judge, planted_mock, slot_one_judge, FnBackend, PanickingBackend,
};

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use cache::PurposeCaches;

/// What a request is for. Selects the cache file and the default
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Tagging,
    Scoring,
    Judging,
}

impl Purpose {
    pub fn cache_file(&self) -> &'static str {
        match self {
            Purpose::Tagging => "tagging.cache.jsonl",
            Purpose::Scoring => "scoring.cache.jsonl",
            Purpose::Judging => "judging.cache.jsonl",
        }
    }

    /// Default sampling temperature: diverse tags, stable scores and
    /// verdicts.
    pub fn default_temperature(&self) -> f64 {
        match self {
            Purpose::Tagging => 0.7,
            Purpose::Scoring | Purpose::Judging => 0.0,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Purpose::Tagging => write!(f, "tagging"),
            Purpose::Scoring => write!(f, "scoring"),
            Purpose::Judging => write!(f, "judging"),
        }
    }
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub purpose: Purpose,
}

impl ChatRequest {
    /// Request with the purpose's default temperature and token budget.
    pub fn new(purpose: Purpose, model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            system: system.into(),
            user: user.into(),
            temperature: purpose.default_temperature(),
            max_tokens: 1024,
            purpose,
        }
    }

    /// Canonical serialization: fixed key order, whitespace-free. Equal
    /// requests produce equal strings no matter how they were built.
    pub fn canonical(&self) -> String {
        let s = |v: &str| serde_json::to_string(v).expect("string serializes");
        format!(
            r#"{{"max_tokens":{},"model":{},"purpose":"{}","system":{},"temperature":{},"user":{}}}"#,
            self.max_tokens,
            s(&self.model),
            self.purpose,
            s(&self.system),
            serde_json::to_string(&self.temperature).expect("float serializes"),
            s(&self.user),
        )
    }

    /// Hex digest of the canonical serialization; the disk-cache key.
    pub fn cache_key(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Response text plus bookkeeping. `text` is verbatim from the backend or
/// cache; no trimming.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// One cached exchange, stored as a JSONL line. First write for a key
/// wins; later writes are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: ChatRequest,
    pub response_text: String,
    pub created_at: u64,
}

/// A single backend failure (before retry accounting).
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Worth another attempt? Rate limits and server errors are; client
    /// errors are not.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Http { status, .. } => *status == 429 || (500..=599).contains(status),
            BackendError::Transport(_) => true,
            BackendError::Protocol(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("cache I/O: {0}")]
    Cache(String),
}

/// Anything that can answer a chat request. Implementations must be safe
/// to call from multiple worker threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// Retry and concurrency knobs.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Total attempts per request, first try included.
    pub max_attempts: u32,
    /// Backoff before retry `n` is `backoff_base * 2^(n-1)`, capped.
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Upper bound on simultaneously outstanding backend calls.
    pub max_concurrency: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_attempts: 5,
            backoff_base: Duration::from_millis(200),
            backoff_cap: Duration::from_secs(8),
            max_concurrency: 8,
        }
    }
}

/// The chokepoint. Shareable across threads; cache writes are serialized
/// through one writer.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    caches: Option<Mutex<PurposeCaches>>,
    config: GatewayConfig,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, cache_dir: Option<PathBuf>, config: GatewayConfig) -> Result<Self, GatewayError> {
        let caches = match cache_dir {
            Some(dir) => Some(Mutex::new(
                PurposeCaches::open(&dir).map_err(|e| GatewayError::Cache(e.to_string()))?,
            )),
            None => None,
        };
        Ok(Gateway {
            backend,
            caches,
            config,
            backend_calls: AtomicU64::new(0),
        })
    }

    /// Gateway with an in-memory-only cacheless setup and default config.
    pub fn ephemeral(backend: Box<dyn ChatBackend>) -> Self {
        Gateway::new(backend, None, GatewayConfig::default()).expect("no cache dir to fail on")
    }

    /// Number of actual backend calls made so far (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Complete one request: cache hit if present, otherwise call the
    /// backend with retries and persist the response.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = req.cache_key();

        if let Some(caches) = &self.caches {
            let mut guard = caches.lock().expect("cache lock");
            if let Some(text) = guard.get(req.purpose, &key) {
                return Ok(ChatResponse {
                    text,
                    cached: true,
                    latency_ms: 0,
                });
            }
        }

        let started = Instant::now();
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(req) {
                Ok(text) => break text,
                Err(err) => {
                    if attempts >= self.config.max_attempts || !err.retryable() {
                        return Err(GatewayError::Backend {
                            attempts,
                            source: err,
                        });
                    }
                    let backoff = self
                        .config
                        .backoff_base
                        .saturating_mul(1 << (attempts - 1).min(16))
                        .min(self.config.backoff_cap);
                    std::thread::sleep(backoff);
                }
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;

        if let Some(caches) = &self.caches {
            let record = CacheRecord {
                key: key.clone(),
                request: req.clone(),
                response_text: text.clone(),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut guard = caches.lock().expect("cache lock");
            guard
                .insert(record)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }

        Ok(ChatResponse {
            text,
            cached: false,
            latency_ms,
        })
    }

    /// Complete a batch on a bounded worker pool. Results come back in
    /// input order regardless of completion order, so scheduling never
    /// changes outputs.
    pub fn complete_batch(&self, reqs: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let workers = self.config.max_concurrency.max(1).min(reqs.len());
        if workers == 1 {
            return reqs.iter().map(|r| self.complete(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ChatResponse, GatewayError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= reqs.len() {
                        break;
                    }
                    let result = self.complete(&reqs[i]);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
            .collect()
    }
}
