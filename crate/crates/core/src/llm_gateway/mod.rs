//! Completion backends, response cache, retry and rate limiting.
//!
//! All prompts are sent as a single user message. The HTTP backend speaks the
//! OpenAI-compatible chat-completions wire format; the mock backend is a
//! deterministic, fully specified stand-in used for offline runs.

mod cache;
mod http;
mod limiter;
mod mock;
pub mod stub;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::HttpBackend;
pub use limiter::RateLimiter;
pub use mock::{mock_complete, MockBackend};

use crate::promptgen::RenderedPrompt;
use crate::respparse::LabelMap;
use crate::sampler::EvalInstance;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const MIN_OUTPUT_TOKENS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("missing or rejected credential ({0})")]
    Credential(String),
    #[error("backend unavailable after {attempts} attempts (last status {last_status:?}): {message}")]
    BackendUnavailable {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("token budget exhausted")]
    BudgetExhausted,
    #[error("invalid model spec: {0}")]
    Spec(String),
}

impl GatewayError {
    /// Errors that will recur for every request of the same model.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Self::Credential(_) | Self::Spec(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpOpenaiCompatible,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backend: BackendKind,
    pub model_name: String,
    /// Row label in reports; defaults to `model_name`.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_max_output_tokens() -> u32 {
    512
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

impl ModelSpec {
    pub fn mock(name: &str) -> Self {
        Self {
            backend: BackendKind::Mock,
            model_name: name.to_string(),
            label: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            endpoint: None,
            api_key_env: default_api_key_env(),
        }
    }

    pub fn http(name: &str, endpoint: &str) -> Self {
        Self {
            backend: BackendKind::HttpOpenaiCompatible,
            endpoint: Some(endpoint.to_string()),
            ..Self::mock(name)
        }
    }

    pub fn display_name(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.model_name)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::Spec("temperature must be >= 0".into()));
        }
        if self.max_output_tokens < MIN_OUTPUT_TOKENS {
            return Err(GatewayError::Spec(format!(
                "max_output_tokens must be >= {MIN_OUTPUT_TOKENS}"
            )));
        }
        if self.backend == BackendKind::HttpOpenaiCompatible && self.endpoint.is_none() {
            return Err(GatewayError::Spec("http backend requires an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.input + self.output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub cache_key: String,
    pub prompt_ref: crate::promptgen::InstanceRef,
    pub raw_text: String,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
    pub attempt_count: u32,
}

/// Content digest of `(model, temperature, max tokens, prompt text)`.
pub fn cache_key(spec: &ModelSpec, prompt_text: &str) -> String {
    let mut h = Sha256::new();
    for part in [
        spec.model_name.as_bytes(),
        &spec.temperature.to_bits().to_le_bytes(),
        &spec.max_output_tokens.to_le_bytes(),
        prompt_text.as_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): `base · 2^(attempt-1)`,
    /// capped.
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms)
    }
}

pub trait Backend: Send + Sync {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        instance: &EvalInstance,
        spec: &ModelSpec,
    ) -> Result<CompletionRecord, GatewayError>;

    /// Whether calls leave the process (and so count against budgets).
    fn networked(&self) -> bool;

    /// HTTP requests sent so far, retries included.
    fn requests_sent(&self) -> usize {
        0
    }
}

/// Shared ceiling on tokens spent by networked calls.
#[derive(Debug)]
pub struct TokenBudget {
    limit: u64,
    used: Mutex<u64>,
}

impl TokenBudget {
    pub fn new(limit: u64) -> Self {
        Self {
            limit,
            used: Mutex::new(0),
        }
    }

    pub fn try_reserve(&self, n: u64) -> bool {
        let mut used = self.used.lock().unwrap();
        if *used + n > self.limit {
            return false;
        }
        *used += n;
        true
    }

    /// Replace a reservation with the tokens actually spent.
    pub fn settle(&self, reserved: u64, actual: u64) {
        let mut used = self.used.lock().unwrap();
        *used = used.saturating_sub(reserved) + actual;
    }

    pub fn used(&self) -> u64 {
        *self.used.lock().unwrap()
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub cache_hits: AtomicUsize,
    pub cache_misses: AtomicUsize,
    pub backend_calls: AtomicUsize,
    pub evicted: AtomicUsize,
    pub new_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub backend_calls: usize,
    pub network_requests: usize,
    pub evicted: usize,
    pub new_tokens: u64,
}

impl GatewayStats {
    fn snapshot(&self, network_requests: usize) -> StatsSnapshot {
        StatsSnapshot {
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            network_requests,
            evicted: self.evicted.load(Ordering::SeqCst),
            new_tokens: self.new_tokens.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub concurrency: usize,
    pub requests_per_minute: Option<f64>,
    pub burst: u32,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            concurrency: 4,
            requests_per_minute: None,
            burst: 1,
            retry: RetryPolicy::default(),
        }
    }
}

/// One model endpoint with its cache, limiter and optional token budget.
pub struct Gateway {
    pub spec: ModelSpec,
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    concurrency: usize,
    budget: Option<std::sync::Arc<TokenBudget>>,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(spec: ModelSpec, backend: Box<dyn Backend>, cfg: &GatewayConfig) -> Self {
        Self {
            spec,
            backend,
            cache: None,
            limiter: cfg
                .requests_per_minute
                .map(|rpm| RateLimiter::per_minute(rpm, cfg.burst.max(1))),
            concurrency: cfg.concurrency.max(1),
            budget: None,
            stats: GatewayStats::default(),
        }
    }

    /// Build the backend named by `spec`.
    pub fn for_spec(spec: ModelSpec, cfg: &GatewayConfig, label_map: LabelMap) -> Result<Self, GatewayError> {
        spec.validate()?;
        let backend: Box<dyn Backend> = match spec.backend {
            BackendKind::Mock => Box::new(MockBackend::new(label_map)),
            BackendKind::HttpOpenaiCompatible => Box::new(HttpBackend::new(cfg.retry)?),
        };
        Ok(Self::new(spec, backend, cfg))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_budget(mut self, budget: std::sync::Arc<TokenBudget>) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot(self.backend.requests_sent())
    }

    /// Call the backend directly, bypassing the cache but honoring the rate
    /// limit and token budget.
    pub fn complete(&self, prompt: &RenderedPrompt, instance: &EvalInstance) -> Result<CompletionRecord, GatewayError> {
        let networked = self.backend.networked();
        let reserve = prompt.token_estimate as u64 + self.spec.max_output_tokens as u64;
        if networked {
            if let Some(b) = &self.budget {
                if !b.try_reserve(reserve) {
                    return Err(GatewayError::BudgetExhausted);
                }
            }
            if let Some(l) = &self.limiter {
                l.acquire();
            }
        }
        self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
        let out = self.backend.complete(prompt, instance, &self.spec);
        if networked {
            if let Some(b) = &self.budget {
                let spent = out.as_ref().map(|r| r.token_usage.total()).unwrap_or(0);
                b.settle(reserve, spent);
            }
        }
        if let Ok(r) = &out {
            self.stats.new_tokens.fetch_add(r.token_usage.total(), Ordering::SeqCst);
        }
        out
    }

    /// Serve from the cache when possible, otherwise complete and persist.
    pub fn cached_complete(&self, prompt: &RenderedPrompt, instance: &EvalInstance) -> Result<CompletionRecord, GatewayError> {
        let key = cache_key(&self.spec, &prompt.text);
        if let Some(cache) = &self.cache {
            match cache.get(&key) {
                Ok(Some(rec)) => {
                    self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(rec);
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!("evicting corrupt cache entry {key}: {e}");
                    self.stats.evicted.fetch_add(1, Ordering::SeqCst);
                    cache.evict(&key);
                }
            }
            self.stats.cache_misses.fetch_add(1, Ordering::SeqCst);
        }
        let rec = self.complete(prompt, instance)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&rec) {
                log::warn!("could not persist cache entry {key}: {e}");
            }
        }
        Ok(rec)
    }

    /// Complete a batch with at most `concurrency` requests in flight. Results
    /// keep the input order. After a fatal error the remaining jobs fail with
    /// the same error without being sent.
    pub fn complete_all(&self, jobs: &[(RenderedPrompt, &EvalInstance)]) -> Vec<Result<CompletionRecord, GatewayError>> {
        let next = AtomicUsize::new(0);
        let fatal: Mutex<Option<GatewayError>> = Mutex::new(None);
        let slots: Vec<Mutex<Option<Result<CompletionRecord, GatewayError>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.concurrency.min(jobs.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((prompt, inst)) = jobs.get(i) else { break };
                    if let Some(e) = fatal.lock().unwrap().clone() {
                        *slots[i].lock().unwrap() = Some(Err(e));
                        continue;
                    }
                    let r = self.cached_complete(prompt, inst);
                    if let Err(e) = &r {
                        if e.is_fatal() {
                            fatal.lock().unwrap().get_or_insert_with(|| e.clone());
                        }
                    }
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every job ran"))
            .collect()
    }
}
