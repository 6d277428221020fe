//! Agent invocation backends: a scripted mock and an OpenAI-compatible HTTP client.
//!
//! Cost accounting always uses the token counts a backend reports. The mock
//! takes them from its script rather than from text length, so tests can
//! steer costs exactly.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{BackendEndpoint, ModelCatalog};
use crate::topology::{Role, Topology};

pub const DEFAULT_TIMEOUT_SECS: u64 = 60;
pub const DEFAULT_PROMPT_TOKENS: u64 = 500;

/// Who is calling: lets scripted backends key responses without inspecting prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub run_seed: u64,
    pub task_id: String,
    pub topology: Topology,
    pub role: Role,
    /// 1-based count of calls made by this role so far in the run.
    pub step: u32,
    /// 0 for the first try, 1 for the retry.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub context: CallContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response has no usage field `{0}`")]
    MissingUsage(&'static str),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no mock script rule for role {role} in {topology} (task `{task_id}`)")]
    NoScript { role: Role, topology: Topology, task_id: String },
    #[error("mock script for role {role} exhausted at step {step}")]
    ScriptExhausted { role: Role, step: u32 },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("no backend registered for `{0}`")]
    UnknownBackend(String),
}

impl BackendError {
    /// Worth one more attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) | Self::Timeout | Self::Scripted(_) => true,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Caused by configuration rather than by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::NoScript { .. } | Self::ScriptExhausted { .. } | Self::MissingApiKey(_) | Self::UnknownBackend(_)
        )
    }
}

pub trait Backend: Send + Sync {
    fn invoke(&self, request: &CallRequest) -> Result<CallResponse, BackendError>;

    /// Wait before retrying after the given failed attempt (0-based).
    fn retry_backoff(&self, _attempt: u32) -> Duration {
        Duration::ZERO
    }
}

// ---------------------------------------------------------------------------
// scripted mock

/// Token count given as a fixed number or an inclusive `[lo, hi]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenSpec {
    Fixed(u64),
    Range([u64; 2]),
}

impl TokenSpec {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            TokenSpec::Fixed(n) => n,
            TokenSpec::Range([lo, hi]) => {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                rng.random_range(lo..=hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    /// Fail every attempt with this message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
    /// Fail this many attempts before answering.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_attempts: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl ScriptedResponse {
    pub fn new(text: impl Into<String>, completion_tokens: u64) -> Self {
        Self { text: text.into(), completion_tokens, prompt_tokens: None, fail: None, fail_attempts: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRule {
    /// Candidate outputs; one is drawn per call.
    pub texts: Vec<String>,
    pub completion_tokens: TokenSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<TokenSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Fixed(ScriptedResponse),
    /// Response `k` answers step `k + 1`; later steps are an error.
    Sequence(Vec<ScriptedResponse>),
    Generator(GeneratorRule),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Selector {
    fn matches(&self, req: &CallRequest) -> bool {
        let ctx = &req.context;
        self.role.is_none_or(|r| r == ctx.role)
            && self.topology.is_none_or(|t| t == ctx.topology)
            && self.task_id.as_ref().is_none_or(|t| *t == ctx.task_id)
            && self.model.as_ref().is_none_or(|m| *m == req.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Selector,
    #[serde(flatten)]
    pub behavior: Behavior,
}

/// Declarative mock behaviour; the first rule whose selector matches answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prompt_tokens")]
    pub default_prompt_tokens: u64,
    pub rules: Vec<ScriptRule>,
}

fn default_prompt_tokens() -> u64 {
    DEFAULT_PROMPT_TOKENS
}

impl MockScript {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { seed: 0, default_prompt_tokens: DEFAULT_PROMPT_TOKENS, rules }
    }

    pub fn rule(mut self, when: Selector, behavior: Behavior) -> Self {
        self.rules.push(ScriptRule { when, behavior });
        self
    }
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stateless scripted backend; the response depends only on the script and the request.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: MockScript,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn call_rng(&self, ctx: &CallContext) -> ChaCha8Rng {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        h = fnv1a(&self.script.seed.to_le_bytes(), h);
        h = fnv1a(&ctx.run_seed.to_le_bytes(), h);
        h = fnv1a(ctx.task_id.as_bytes(), h);
        h = fnv1a(&[0xff, ctx.topology.index() as u8, ctx.role as u8], h);
        h = fnv1a(&ctx.step.to_le_bytes(), h);
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl Backend for ScriptedBackend {
    fn invoke(&self, req: &CallRequest) -> Result<CallResponse, BackendError> {
        let ctx = &req.context;
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.when.matches(req))
            .ok_or_else(|| BackendError::NoScript {
                role: ctx.role,
                topology: ctx.topology,
                task_id: ctx.task_id.clone(),
            })?;

        let (text, completion, prompt) = match &rule.behavior {
            Behavior::Fixed(r) => scripted(r, ctx)?,
            Behavior::Sequence(rs) => {
                let r = rs
                    .get(ctx.step.saturating_sub(1) as usize)
                    .ok_or(BackendError::ScriptExhausted { role: ctx.role, step: ctx.step })?;
                scripted(r, ctx)?
            }
            Behavior::Generator(g) => {
                if g.texts.is_empty() {
                    return Err(BackendError::ScriptExhausted { role: ctx.role, step: ctx.step });
                }
                let mut rng = self.call_rng(ctx);
                let text = g.texts[rng.random_range(0..g.texts.len())].clone();
                let completion = g.completion_tokens.draw(&mut rng);
                let prompt = g.prompt_tokens.map(|p| p.draw(&mut rng));
                (text, completion, prompt)
            }
        };
        Ok(CallResponse {
            text,
            prompt_tokens: prompt.unwrap_or(self.script.default_prompt_tokens),
            completion_tokens: completion.min(req.max_tokens as u64),
        })
    }
}

fn scripted(r: &ScriptedResponse, ctx: &CallContext) -> Result<(String, u64, Option<u64>), BackendError> {
    if let Some(msg) = &r.fail {
        return Err(BackendError::Scripted(msg.clone()));
    }
    if ctx.attempt < r.fail_attempts {
        return Err(BackendError::Scripted(format!("attempt {} scripted to fail", ctx.attempt)));
    }
    Ok((r.text.clone(), r.completion_tokens, r.prompt_tokens))
}

// ---------------------------------------------------------------------------
// HTTP

/// Token bucket allowing `rate` requests per second with bursts up to `max(rate, 1)`.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Self {
        let burst = rate.max(1.0);
        Self { rate, state: Mutex::new((burst, Instant::now())) }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("limiter lock");
                let now = Instant::now();
                let burst = self.rate.max(1.0);
                st.0 = (st.0 + now.duration_since(st.1).as_secs_f64() * self.rate).min(burst);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Default)]
pub struct HttpMetrics {
    pub requests: AtomicU64,
    pub failures: AtomicU64,
    pub prompt_tokens: AtomicU64,
    pub completion_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl HttpMetrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

/// Client for `POST <base_url>/chat/completions`.
pub struct HttpBackend {
    url: String,
    api_key: Result<String, String>,
    client: reqwest::blocking::Client,
    limiter: Option<RateLimiter>,
    backoff_base: Duration,
    pub metrics: HttpMetrics,
}

impl HttpBackend {
    /// `backend_id` names the default key variable, `<ID>_API_KEY`.
    pub fn from_endpoint(backend_id: &str, endpoint: &BackendEndpoint) -> Self {
        let var = endpoint.api_key_env.clone().unwrap_or_else(|| default_key_var(backend_id));
        let api_key = std::env::var(&var).map_err(|_| var);
        let timeout = Duration::from_secs(endpoint.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS));
        Self::new(&endpoint.base_url, api_key, timeout, endpoint.requests_per_second)
    }

    pub fn new(
        base_url: &str,
        api_key: Result<String, String>,
        timeout: Duration,
        requests_per_second: Option<f64>,
    ) -> Self {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().expect("http client");
        Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            client,
            limiter: requests_per_second.filter(|r| *r > 0.0).map(RateLimiter::new),
            backoff_base: Duration::from_secs(1),
            metrics: HttpMetrics::default(),
        }
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn send(&self, req: &CallRequest) -> Result<CallResponse, BackendError> {
        let key = self.api_key.as_ref().map_err(|var| BackendError::MissingApiKey(var.clone()))?;
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let body = ChatRequest {
            model: &req.model,
            messages: vec![
                ChatMessage { role: "system", content: &req.system },
                ChatMessage { role: "user", content: &req.user },
            ],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut http = self.client.post(&self.url).json(&body);
        if !key.is_empty() {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: text });
        }
        parse_chat_response(&text)
    }
}

fn default_key_var(backend_id: &str) -> String {
    let id: String = backend_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("{id}_API_KEY")
}

pub fn parse_chat_response(body: &str) -> Result<CallResponse, BackendError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
    let usage = |field: &'static str| {
        v.get("usage")
            .and_then(|u| u.get(field))
            .and_then(|n| n.as_u64())
            .ok_or(BackendError::MissingUsage(field))
    };
    Ok(CallResponse {
        text: text.to_string(),
        prompt_tokens: usage("prompt_tokens")?,
        completion_tokens: usage("completion_tokens")?,
    })
}

impl Backend for HttpBackend {
    fn invoke(&self, req: &CallRequest) -> Result<CallResponse, BackendError> {
        self.metrics.requests.fetch_add(1, Ordering::Relaxed);
        match self.send(req) {
            Ok(r) => {
                self.metrics.prompt_tokens.fetch_add(r.prompt_tokens, Ordering::Relaxed);
                self.metrics.completion_tokens.fetch_add(r.completion_tokens, Ordering::Relaxed);
                Ok(r)
            }
            Err(e) => {
                self.metrics.failures.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    fn retry_backoff(&self, attempt: u32) -> Duration {
        self.backoff_base * 2u32.saturating_pow(attempt)
    }
}

// ---------------------------------------------------------------------------

/// Maps catalog `backend_id`s to backends, with an optional catch-all.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
    fallback: Option<Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every model served by one backend.
    pub fn single(backend: Arc<dyn Backend>) -> Self {
        Self { backends: BTreeMap::new(), fallback: Some(backend) }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::single(Arc::new(ScriptedBackend::new(script)))
    }

    pub fn from_catalog(catalog: &ModelCatalog) -> Self {
        let mut reg = Self::new();
        for (id, endpoint) in catalog.backends() {
            reg.register(id, Arc::new(HttpBackend::from_endpoint(id, endpoint)));
        }
        reg
    }

    pub fn register(&mut self, backend_id: &str, backend: Arc<dyn Backend>) {
        self.backends.insert(backend_id.to_string(), backend);
    }

    pub fn resolve(&self, backend_id: &str) -> Result<&dyn Backend, BackendError> {
        self.backends
            .get(backend_id)
            .or(self.fallback.as_ref())
            .map(|b| b.as_ref())
            .ok_or_else(|| BackendError::UnknownBackend(backend_id.to_string()))
    }
}
