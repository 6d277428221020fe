//! Task text to fixed-size state vectors.
//!
//! The default [`HashingEmbedder`] is a signed feature-hashing vectorizer over
//! word unigrams and bigrams, L2-normalized. It needs no model files and gives
//! bitwise-identical output for identical input. [`RemoteEmbedder`] calls an
//! HTTP service when a learned encoder is preferred.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EMBED_DIM: usize = 384;

pub const EMBED_URL_ENV: &str = "AGENTBUDGET_EMBED_URL";
pub const EMBED_TOKEN_ENV: &str = "AGENTBUDGET_EMBED_TOKEN";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Network(String),
    #[error("embedding service returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub values: Vec<f64>,
}

impl TaskEmbedding {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &TaskEmbedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let n = self.norm() * other.norm();
        if n == 0.0 {
            0.0
        } else {
            dot / n
        }
    }

    /// Truncate or zero-pad to `dim`, then scale to unit length (zero stays zero).
    pub fn fitted(mut values: Vec<f64>, dim: usize) -> Self {
        values.resize(dim, 0.0);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self { values }
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TaskEmbedding, EmbedError>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            // separator keeps ("ab","c") and ("a","bc") apart
            h ^= 0xff;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Lowercased whitespace tokens with surrounding punctuation trimmed.
fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| {
            let lower = raw.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                lower
            } else {
                trimmed.to_string()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn add(&self, acc: &mut [f64], h: u64) {
        let bucket = (h % self.dim as u64) as usize;
        // sign from a high bit, independent of the bucket index
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }

    pub fn embed_text(&self, text: &str) -> TaskEmbedding {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return TaskEmbedding::zeros(self.dim);
        }
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            self.add(&mut acc, fnv1a(&[b"u", tok.as_bytes()]));
        }
        for pair in tokens.windows(2) {
            self.add(&mut acc, fnv1a(&[b"b", pair[0].as_bytes(), pair[1].as_bytes()]));
        }
        if acc.iter().all(|&v| v == 0.0) {
            // every feature cancelled; fall back to one bucket for the whole text
            self.add(&mut acc, fnv1a(&[b"t", text.as_bytes()]));
        }
        TaskEmbedding::fitted(acc, self.dim)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TaskEmbedding, EmbedError> {
        Ok(self.embed_text(text))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Client for an embedding service speaking `{"input": ..}` -> `{"embedding": [..]}`.
///
/// One blocking client is shared internally, so a single instance can serve
/// concurrent callers.
pub struct RemoteEmbedder {
    endpoint: String,
    token: Option<String>,
    dim: usize,
    /// Reject responses whose length differs from `dim` instead of fitting them.
    strict: bool,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, dim: usize) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        Self { endpoint: endpoint.into(), token, dim, strict: false, client }
    }

    pub fn from_env(dim: usize) -> Result<Self, EmbedError> {
        let url = std::env::var(EMBED_URL_ENV).map_err(|_| EmbedError::MissingEnv(EMBED_URL_ENV))?;
        Ok(Self::new(url, std::env::var(EMBED_TOKEN_ENV).ok(), dim))
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TaskEmbedding, EmbedError> {
        embed_remote(&self.client, &self.endpoint, self.token.as_deref(), text, self.dim, self.strict)
    }
}

pub fn embed_remote(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    token: Option<&str>,
    text: &str,
    dim: usize,
    strict: bool,
) -> Result<TaskEmbedding, EmbedError> {
    let mut req = client.post(endpoint).json(&EmbedRequest { input: text });
    if let Some(token) = token.filter(|t| !t.is_empty()) {
        req = req.bearer_auth(token);
    }
    let resp = req.send().map_err(|e| EmbedError::Network(e.to_string()))?;
    let status = resp.status();
    let body = resp.text().map_err(|e| EmbedError::Network(e.to_string()))?;
    if !status.is_success() {
        return Err(EmbedError::Status { status: status.as_u16(), body });
    }
    let parsed: EmbedResponse =
        serde_json::from_str(&body).map_err(|e| EmbedError::Malformed(e.to_string()))?;
    let got = parsed.embedding.len();
    if got == 0 || (strict && got != dim) {
        return Err(EmbedError::DimensionMismatch { expected: dim, got });
    }
    if parsed.embedding.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::Malformed("non-finite value in embedding".into()));
    }
    Ok(TaskEmbedding::fitted(parsed.embedding, dim))
}
