//! Model backends behind one interface.
//!
//! Three kinds exist: a remote OpenAI-compatible chat-completion endpoint, a
//! long-lived child process speaking a newline-delimited protocol, and a
//! deterministic mock with a planted error rate. A [`BackendHandle`] wraps
//! any of them with retry/backoff and call accounting; [`ResponseCache`] adds
//! write-once on-disk caching on top.

mod cache;
mod external;
mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{hash_parts, sha256_hex};
use crate::LabelKind;

pub use cache::{cached_query, CacheLookup, ResponseCache};
pub use external::{external_predict, ExternalBackend, ProtocolRequest, ProtocolResponse};
pub use mock::{mock_oracle, MockBackend};
pub use remote::RemoteBackend;

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding { temperature: 0.0, max_tokens: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
    pub digest: String,
}

impl ImagePayload {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        let digest = sha256_hex(&bytes);
        ImagePayload { bytes, media_type: media_type.into(), digest }
    }

    pub fn data_uri(&self) -> String {
        use base64::Engine;
        format!("data:{};base64,{}", self.media_type, base64::engine::general_purpose::STANDARD.encode(&self.bytes))
    }
}

/// One model call. `request_key` is a content hash over everything that can
/// influence the answer, and is used both as cache key and as the correlation
/// id on the external-process protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub record_id: Option<String>,
    pub prompt_text: String,
    pub image: Option<ImagePayload>,
    pub decoding: Decoding,
    pub label_kind: Option<LabelKind>,
    pub request_key: String,
}

impl BackendRequest {
    pub fn new(
        backend_id: &str,
        record_id: Option<String>,
        prompt_text: String,
        image: Option<ImagePayload>,
        decoding: Decoding,
        label_kind: Option<LabelKind>,
    ) -> Self {
        let mut req = BackendRequest { record_id, prompt_text, image, decoding, label_kind, request_key: String::new() };
        req.request_key = req.compute_key(backend_id);
        req
    }

    pub fn compute_key(&self, backend_id: &str) -> String {
        let image = self.image.as_ref().map(|i| i.digest.as_str()).unwrap_or("none");
        hash_parts([
            backend_id,
            self.record_id.as_deref().unwrap_or(""),
            &self.prompt_text,
            image,
            &format!("{:016x}", self.decoding.temperature.to_bits()),
            &self.decoding.max_tokens.to_string(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    /// Raw model output, unmodified.
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    /// Relative jitter applied to each backoff, e.g. 0.2 for +/-20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 5, base_backoff_ms: 500, jitter: 0.2 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let base = self.base_backoff_ms as f64 * 2f64.powi(retry.saturating_sub(1) as i32);
        let factor = if self.jitter > 0.0 { rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter) } else { 1.0 };
        Duration::from_secs_f64((base * factor).max(0.0) / 1000.0)
    }
}

fn default_remote_timeout() -> u64 {
    60_000
}

fn default_external_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    RemoteApi {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        token_env: String,
        #[serde(default = "default_remote_timeout")]
        timeout_ms: u64,
    },
    ExternalCommand {
        command: Vec<String>,
        #[serde(default = "default_external_timeout")]
        timeout_ms: u64,
    },
    Mock {
        noise_rate: f64,
        #[serde(default)]
        seed: u64,
        /// Labeled split file the mock reads ground truth from.
        truth_source: PathBuf,
        /// Artificial per-call delay, for throughput experiments.
        #[serde(default)]
        latency_ms: u64,
    },
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::RemoteApi { .. } => "remote_api",
            BackendKind::ExternalCommand { .. } => "external_command",
            BackendKind::Mock { .. } => "mock",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.id.is_empty() {
            return Err(BackendError::Config("backend id is empty".into()));
        }
        match &self.kind {
            BackendKind::Mock { noise_rate, .. } if !(0.0..=1.0).contains(noise_rate) => Err(BackendError::Config(
                format!("backend `{}`: noise_rate {noise_rate} is not a probability", self.id),
            )),
            BackendKind::ExternalCommand { command, .. } if command.is_empty() => {
                Err(BackendError::Config(format!("backend `{}`: empty command", self.id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("no response for request {key}")]
    MissingResponse { key: String },
    #[error("timed out waiting for request {key}")]
    Timeout { key: String },
    #[error("backend process exited: {0}")]
    ProcessExited(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Outcome of a single attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    /// Worth retrying (timeouts, 429, 5xx).
    Transient(String),
    Fatal(BackendError),
}

/// A single-attempt model call. Retrying is the handle's job.
pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError>;
}

/// A backend plus retry policy and call counters.
pub struct BackendHandle {
    id: String,
    kind: &'static str,
    inner: Box<dyn Backend>,
    policy: RetryPolicy,
    attempts: AtomicU64,
    queries: AtomicU64,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle").field("id", &self.id).field("kind", &self.kind).finish()
    }
}

impl BackendHandle {
    pub fn new(id: impl Into<String>, kind: &'static str, inner: Box<dyn Backend>, policy: RetryPolicy) -> Self {
        BackendHandle { id: id.into(), kind, inner, policy, attempts: AtomicU64::new(0), queries: AtomicU64::new(0) }
    }

    pub fn from_spec(spec: &BackendSpec) -> Result<Self, BackendError> {
        spec.validate()?;
        let inner: Box<dyn Backend> = match &spec.kind {
            BackendKind::Mock { noise_rate, seed, truth_source, latency_ms } => {
                Box::new(MockBackend::from_truth_file(truth_source, *noise_rate, *seed, *latency_ms)?)
            }
            BackendKind::RemoteApi { endpoint, model, token_env, timeout_ms } => Box::new(RemoteBackend::new(
                endpoint.clone(),
                model.clone(),
                token_env.clone(),
                Duration::from_millis(*timeout_ms),
            )?),
            BackendKind::ExternalCommand { command, timeout_ms } => {
                Box::new(ExternalBackend::new(command.clone(), Duration::from_millis(*timeout_ms)))
            }
        };
        Ok(BackendHandle::new(spec.id.clone(), spec.kind.name(), inner, spec.retry))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Total attempts that reached the underlying backend.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    /// Total logical queries (each may span several attempts).
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Query with retries on transient failures and exponential backoff.
    pub fn query(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let start = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.inner.call(request) {
                Ok(text) => {
                    return Ok(BackendResponse {
                        text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err(CallError::Fatal(e)) => return Err(e),
                Err(CallError::Transient(msg)) => {
                    if attempt > self.policy.max_retries {
                        return Err(BackendError::ExhaustedRetries { attempts: attempt, last: msg });
                    }
                    log::debug!("backend {}: attempt {attempt} failed ({msg}), retrying", self.id);
                    std::thread::sleep(self.policy.backoff(attempt));
                }
            }
        }
    }
}

/// A backend with an optional response cache in front of it.
#[derive(Debug)]
pub struct Client {
    pub backend: BackendHandle,
    pub cache: Option<ResponseCache>,
}

impl Client {
    pub fn new(backend: BackendHandle, cache: Option<ResponseCache>) -> Self {
        Client { backend, cache }
    }

    pub fn id(&self) -> &str {
        self.backend.id()
    }

    /// Returns the response and whether it came from the cache.
    pub fn query(&self, request: &BackendRequest) -> Result<(BackendResponse, bool), BackendError> {
        match &self.cache {
            Some(cache) => cached_query(cache, &self.backend, request),
            None => self.backend.query(request).map(|r| (r, false)),
        }
    }
}
