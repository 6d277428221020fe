//! Priced, tier-ranked model catalog and per-call cost estimates.
//!
//! Prices are quoted per million tokens. A cost unit is
//! `(tokens * per_token_price) * 1e6`, which makes one unit equal to one
//! micro-dollar when prices are quoted in dollars. Numerically this reduces to
//! `tokens * price_per_mtok`, so that is what [`estimate_cost`] evaluates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Scale applied to the per-token cost sum to obtain cost units.
pub const COST_RESCALE: f64 = 1e6;

/// Default input-token estimate per call used for provisioning.
pub const DEFAULT_INPUT_TOKENS: u64 = 500;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog is empty")]
    Empty,
    #[error("model `{name}`: tier must be >= 1")]
    ZeroTier { name: String },
    #[error("model `{name}`: {field} must be finite and >= 0, got {value}")]
    BadPrice { name: String, field: &'static str, value: f64 },
    #[error("tier {tier} has no models (tiers must be contiguous from 1 to {max_tier})")]
    MissingTier { tier: u32, max_tier: u32 },
    #[error("duplicate model name `{0}`")]
    DuplicateName(String),
    #[error("no samples")]
    NoSamples,
    #[error("reading catalog {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing catalog {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

/// One model offered by a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// 1 is the strongest tier.
    pub tier: u32,
    pub price_in_per_mtok: f64,
    pub price_out_per_mtok: f64,
    pub backend_id: String,
}

impl ModelSpec {
    /// Price of a single input token.
    pub fn per_token_in(&self) -> f64 {
        self.price_in_per_mtok / COST_RESCALE
    }

    pub fn per_token_out(&self) -> f64 {
        self.price_out_per_mtok / COST_RESCALE
    }
}

/// HTTP endpoint settings for one backend id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CatalogFile {
    models: Vec<ModelSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    backends: BTreeMap<String, BackendEndpoint>,
}

/// Validated model pool. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCatalog {
    models: Vec<ModelSpec>,
    backends: BTreeMap<String, BackendEndpoint>,
    num_tiers: u32,
}

impl ModelCatalog {
    pub fn new(models: Vec<ModelSpec>) -> Result<Self, CatalogError> {
        Self::with_backends(models, BTreeMap::new())
    }

    pub fn with_backends(
        models: Vec<ModelSpec>,
        backends: BTreeMap<String, BackendEndpoint>,
    ) -> Result<Self, CatalogError> {
        if models.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut names = std::collections::HashSet::new();
        for m in &models {
            if m.tier == 0 {
                return Err(CatalogError::ZeroTier { name: m.name.clone() });
            }
            for (field, value) in [
                ("price_in_per_mtok", m.price_in_per_mtok),
                ("price_out_per_mtok", m.price_out_per_mtok),
            ] {
                if !value.is_finite() || value < 0.0 {
                    return Err(CatalogError::BadPrice { name: m.name.clone(), field, value });
                }
            }
            if !names.insert(m.name.as_str()) {
                return Err(CatalogError::DuplicateName(m.name.clone()));
            }
        }
        let num_tiers = models.iter().map(|m| m.tier).max().unwrap_or(0);
        for tier in 1..=num_tiers {
            if !models.iter().any(|m| m.tier == tier) {
                return Err(CatalogError::MissingTier { tier, max_tier: num_tiers });
            }
        }
        Ok(Self { models, backends, num_tiers })
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        let file: CatalogFile = serde_json::from_str(s)?;
        Self::with_backends(file.models, file.backends).map_err(serde::de::Error::custom)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let display = path.display().to_string();
        let text = fs::read_to_string(path)
            .map_err(|source| CatalogError::Io { path: display.clone(), source })?;
        Self::from_json_str(&text).map_err(|source| CatalogError::Parse { path: display, source })
    }

    pub fn to_json_string(&self) -> String {
        let file = CatalogFile { models: self.models.clone(), backends: self.backends.clone() };
        serde_json::to_string_pretty(&file).expect("catalog serializes")
    }

    /// SHA-256 over the canonical JSON encoding, used as dataset provenance.
    pub fn content_hash(&self) -> String {
        let file = CatalogFile { models: self.models.clone(), backends: self.backends.clone() };
        let canonical = serde_json::to_vec(&file).expect("catalog serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn num_tiers(&self) -> usize {
        self.num_tiers as usize
    }

    pub fn backend(&self, id: &str) -> Option<&BackendEndpoint> {
        self.backends.get(id)
    }

    pub fn backends(&self) -> &BTreeMap<String, BackendEndpoint> {
        &self.backends
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Models of one tier in declaration order.
    pub fn tier_models(&self, tier: u32) -> impl Iterator<Item = &ModelSpec> {
        self.models.iter().filter(move |m| m.tier == tier)
    }

    /// The model that stands for a tier during provisioning: the first one declared.
    pub fn tier_representative(&self, tier: u32) -> Option<&ModelSpec> {
        self.tier_models(tier).next()
    }

    /// Per-call unit cost of each tier's representative, ordered from tier 1 down.
    pub fn tier_costs(&self, t_in: u64, t_out: u64) -> Vec<f64> {
        (1..=self.num_tiers)
            .map(|tier| {
                let model = self.tier_representative(tier).expect("tiers validated contiguous");
                estimate_cost(model, t_in, t_out).unit_cost
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub t_in: u64,
    pub t_out: u64,
    pub unit_cost: f64,
}

/// Cost of one call in cost units.
pub fn estimate_cost(model: &ModelSpec, t_in: u64, t_out: u64) -> CostEstimate {
    // (t_in * p_in + t_out * p_out) * 1e6 with p = per-mtok / 1e6; the scale
    // factors cancel, so evaluate without them to avoid rounding drift.
    let unit_cost = t_in as f64 * model.price_in_per_mtok + t_out as f64 * model.price_out_per_mtok;
    CostEstimate { t_in, t_out, unit_cost }
}

/// Upper bound on output length taken from sampled completions.
pub fn estimate_output_tokens(sampled_lengths: &[u64]) -> Result<u64, CatalogError> {
    sampled_lengths.iter().copied().max().ok_or(CatalogError::NoSamples)
}
