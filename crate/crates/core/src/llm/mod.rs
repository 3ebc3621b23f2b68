//! Completion interface over a remote chat endpoint and two offline mocks.

pub mod mock;
pub mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{mock_echo, mock_evidence_aware, read_prompt, MockEvidenceConfig, PromptView};
pub use remote::{request_body, HttpResponse, ReqwestTransport, Transport, TransportError, TransportErrorKind};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LlmError {
    #[error("invalid llm config: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("mock llm: {0}")]
    Mock(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    Remote,
    MockEcho,
    #[default]
    MockEvidence,
}

impl fmt::Display for LlmBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LlmBackend::Remote => "remote",
            LlmBackend::MockEcho => "mock_echo",
            LlmBackend::MockEvidence => "mock_evidence",
        })
    }
}

impl FromStr for LlmBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(LlmBackend::Remote),
            "mock_echo" => Ok(LlmBackend::MockEcho),
            "mock_evidence" => Ok(LlmBackend::MockEvidence),
            other => Err(format!("unknown llm backend `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    /// Base URL; requests go to `{endpoint_url}/chat/completions`.
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    pub seed: u64,
    pub mock: MockEvidenceConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackend::MockEvidence,
            endpoint_url: None,
            model_name: "qwen3-8b".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            api_key_env: None,
            seed: 0,
            mock: MockEvidenceConfig::default(),
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!("temperature must be non-negative, got {}", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        if self.backend == LlmBackend::Remote && self.endpoint_url.as_deref().is_none_or(str::is_empty) {
            return Err(LlmError::Config("remote backend requires endpoint_url".into()));
        }
        if !(0.0..=1.0).contains(&self.mock.swap_prob) || !(self.mock.history_jitter >= 0.0) {
            return Err(LlmError::Config("mock noise parameters out of range".into()));
        }
        Ok(())
    }
}

/// One prompt to complete. `id` ties the result back to its instance;
/// `sample` distinguishes repeated draws of the same prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRequest {
    pub id: String,
    pub prompt: String,
    /// Overrides the configured temperature.
    pub temperature: Option<f64>,
    pub sample: u32,
}

impl CompletionRequest {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self { id: id.into(), prompt: prompt.into(), temperature: None, sample: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub id: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub backend_tag: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightGate {
    limit: usize,
    state: Mutex<usize>,
    cv: Condvar,
}

pub struct GatePermit<'a> {
    gate: &'a InFlightGate,
}

impl InFlightGate {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), state: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.state.lock().unwrap();
        while *n >= self.limit {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        GatePermit { gate: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.state.lock().unwrap()
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.gate.state.lock().unwrap();
        *n -= 1;
        self.gate.cv.notify_one();
    }
}

/// Seed for one mock completion, stable across runs and platforms.
pub fn mock_seed(seed: u64, prompt: &str, sample: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample.to_le_bytes());
    h.update(prompt.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Thread-safe completion client. Share one instance across workers.
pub struct LlmClient {
    cfg: LlmConfig,
    transport: Option<Arc<dyn Transport>>,
    gate: InFlightGate,
    api_key: Option<String>,
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        let transport: Option<Arc<dyn Transport>> = match cfg.backend {
            LlmBackend::Remote => Some(Arc::new(ReqwestTransport::new()?)),
            _ => None,
        };
        Self::build(cfg, transport)
    }

    /// Client whose remote calls go through `transport`.
    pub fn with_transport(cfg: LlmConfig, transport: Arc<dyn Transport>) -> Result<Self, LlmError> {
        Self::build(cfg, Some(transport))
    }

    fn build(cfg: LlmConfig, transport: Option<Arc<dyn Transport>>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) if cfg.backend == LlmBackend::Remote => Some(
                std::env::var(var).map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?,
            ),
            _ => None,
        };
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self { cfg, transport, gate, api_key })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    pub fn gate(&self) -> &InFlightGate {
        &self.gate
    }

    pub fn backend_tag(&self) -> String {
        match self.cfg.backend {
            LlmBackend::Remote => format!("remote:{}", self.cfg.model_name),
            other => other.to_string(),
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let _permit = self.gate.acquire();
        let start = Instant::now();
        let (text, attempts) = match self.cfg.backend {
            LlmBackend::MockEcho => (mock_echo(&req.prompt)?, 1),
            LlmBackend::MockEvidence => {
                let seed = mock_seed(self.cfg.seed, &req.prompt, req.sample);
                (mock_evidence_aware(&req.prompt, seed, &self.cfg.mock)?, 1)
            }
            LlmBackend::Remote => self.complete_remote(req)?,
        };
        Ok(CompletionResult {
            id: req.id.clone(),
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            attempt_count: attempts,
            backend_tag: self.backend_tag(),
        })
    }

    fn complete_remote(&self, req: &CompletionRequest) -> Result<(String, u32), LlmError> {
        let transport = self.transport.as_ref().ok_or_else(|| LlmError::Config("no transport".into()))?;
        let base = self.cfg.endpoint_url.as_deref().unwrap_or_default().trim_end_matches('/');
        let url = format!("{base}/chat/completions");
        let temperature = req.temperature.unwrap_or(self.cfg.temperature);
        let body = request_body(&self.cfg.model_name, &req.prompt, temperature, self.cfg.max_tokens);
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let mut last_error = String::new();
        let total = self.cfg.max_retries + 1;
        for attempt in 1..=total {
            match transport.post(&url, &headers, &body, timeout) {
                Ok(resp) if resp.status / 100 == 2 => {
                    return remote::parse_response(&resp.body).map(|t| (t, attempt));
                }
                Ok(resp) if resp.status >= 500 || resp.status == 429 => {
                    last_error = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(LlmError::Protocol(format!("HTTP {}: {}", resp.status, truncate(&resp.body, 200))));
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < total {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
        }
        Err(LlmError::Transport { attempts: total, message: last_error })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
