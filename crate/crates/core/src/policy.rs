//! Topology-selection policy and its offline REINFORCE trainer.
//!
//! Network, with ReLU after every layer except the head:
//!
//! ```text
//! embedding (384) -> embed_proj -> 64 \
//!                                      concat (128) -> core -> 128 -> head -> logits (4)
//! budget (1)      -> budget_proj -> 64 /
//! ```
//!
//! The loss over a batch of logged `(state, action, reward)` samples is
//!
//! ```text
//! L = -(1/M) sum_j log pi(a_j | s_j) * R_j  -  beta * (1/M) sum_j H(pi(. | s_j))
//! ```
//!
//! with gradients from hand-written backpropagation and Adam updates. After
//! every epoch the policy is scored by its exact expected reward over the
//! dataset (every topology's outcome is logged per task) and the best-scoring
//! parameters are kept.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ExperienceDataset;
use crate::embedder::{Embedder, TaskEmbedding, DEFAULT_EMBED_DIM};
use crate::reward::{compute_reward, Outcome, RewardConfig, RewardError};
use crate::topology::Topology;

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("action index {action} out of range for {num_actions} topologies")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("task `{task_id}` at budget {budget} is missing outcomes for topologies {missing:?}")]
    MissingTopologies { task_id: String, budget: f64, missing: Vec<usize> },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Embed(#[from] crate::embedder::EmbedError),
    #[error("policy file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            feature_dim: 64,
            hidden_dim: 128,
            num_actions: Topology::ALL.len(),
        }
    }
}

/// Fully connected layer, `weight` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { outputs, inputs, weight: vec![0.0; outputs * inputs], bias: vec![0.0; outputs] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..outputs * inputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { outputs, inputs, weight, bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *out = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad`; writes the input gradient to `dx` if given.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, mut dx: Option<&mut [f64]>) {
        if let Some(dx) = dx.as_deref_mut() {
            dx.iter_mut().for_each(|v| *v = 0.0);
        }
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let start = o * self.inputs;
            let grow = &mut grad.weight[start..start + self.inputs];
            for (gw, &v) in grow.iter_mut().zip(x) {
                *gw += g * v;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let row = &self.weight[start..start + self.inputs];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub const LAYER_NAMES: [&str; 4] = ["embed_proj", "budget_proj", "core", "head"];

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub embed_proj: Dense,
    pub budget_proj: Dense,
    pub core: Dense,
    pub head: Dense,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            embed_proj: Dense::zeros(dims.feature_dim, dims.embed_dim),
            budget_proj: Dense::zeros(dims.feature_dim, 1),
            core: Dense::zeros(dims.hidden_dim, 2 * dims.feature_dim),
            head: Dense::zeros(dims.num_actions, dims.hidden_dim),
        }
    }

    pub fn init<R: Rng>(dims: PolicyDims, rng: &mut R) -> Self {
        Self {
            dims,
            embed_proj: Dense::glorot(dims.feature_dim, dims.embed_dim, rng),
            budget_proj: Dense::glorot(dims.feature_dim, 1, rng),
            core: Dense::glorot(dims.hidden_dim, 2 * dims.feature_dim, rng),
            head: Dense::glorot(dims.num_actions, dims.hidden_dim, rng),
        }
    }

    pub fn seeded(dims: PolicyDims, seed: u64) -> Self {
        Self::init(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn layers(&self) -> [(&'static str, &Dense); 4] {
        [
            (LAYER_NAMES[0], &self.embed_proj),
            (LAYER_NAMES[1], &self.budget_proj),
            (LAYER_NAMES[2], &self.core),
            (LAYER_NAMES[3], &self.head),
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.embed_proj, &mut self.budget_proj, &mut self.core, &mut self.head]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.embed_proj
            .values()
            .chain(self.budget_proj.values())
            .chain(self.core.values())
            .chain(self.head.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embed_proj
            .values_mut()
            .chain(self.budget_proj.values_mut())
            .chain(self.core.values_mut())
            .chain(self.head.values_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_shapes(&self) -> Result<(), PolicyError> {
        let expect = Self::zeros(self.dims);
        for ((name, got), (_, want)) in self.layers().iter().zip(expect.layers().iter()) {
            if got.outputs != want.outputs
                || got.inputs != want.inputs
                || got.weight.len() != want.weight.len()
                || got.bias.len() != want.bias.len()
            {
                return Err(PolicyError::Shape(format!(
                    "{name}: expected {}x{}, got {}x{} ({} weights, {} biases)",
                    want.outputs,
                    want.inputs,
                    got.outputs,
                    got.inputs,
                    got.weight.len(),
                    got.bias.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub embedding: TaskEmbedding,
    /// Budget divided by the reference budget.
    pub budget: f64,
}

impl PolicyState {
    pub fn new(embedding: TaskEmbedding, budget: f64, budget_ref: f64) -> Self {
        Self { embedding, budget: budget / budget_ref }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Trace {
    embed_pre: Vec<f64>,
    budget_pre: Vec<f64>,
    joined: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

fn run_forward(params: &PolicyParams, state: &PolicyState) -> Trace {
    let d = params.dims;
    let mut embed_pre = vec![0.0; d.feature_dim];
    params.embed_proj.forward(&state.embedding.values, &mut embed_pre);
    let mut budget_pre = vec![0.0; d.feature_dim];
    params.budget_proj.forward(&[state.budget], &mut budget_pre);

    let mut joined = Vec::with_capacity(2 * d.feature_dim);
    joined.extend_from_slice(&embed_pre);
    joined.extend_from_slice(&budget_pre);
    relu(&mut joined);

    let mut hidden_pre = vec![0.0; d.hidden_dim];
    params.core.forward(&joined, &mut hidden_pre);
    let mut hidden = hidden_pre.clone();
    relu(&mut hidden);

    let mut logits = vec![0.0; d.num_actions];
    params.head.forward(&hidden, &mut logits);
    Trace { embed_pre, budget_pre, joined, hidden_pre, hidden, logits }
}

/// `log softmax(z)`, shifted by the max for stability.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy in nats of the categorical distribution over `logits`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .map(|lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

fn check_state(params: &PolicyParams, state: &PolicyState) -> Result<(), PolicyError> {
    if state.embedding.dim() != params.dims.embed_dim {
        return Err(PolicyError::Shape(format!(
            "embedding has {} values, policy expects {}",
            state.embedding.dim(),
            params.dims.embed_dim
        )));
    }
    if !state.budget.is_finite() || state.budget < 0.0 {
        return Err(PolicyError::NonFinite("budget input"));
    }
    if state.embedding.values.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("embedding input"));
    }
    Ok(())
}

pub fn forward(params: &PolicyParams, state: &PolicyState) -> Result<PolicyOutput, PolicyError> {
    params.check_shapes()?;
    if !params.is_finite() {
        return Err(PolicyError::NonFinite("parameters"));
    }
    check_state(params, state)?;
    let logits = run_forward(params, state).logits;
    let probabilities = softmax(&logits);
    Ok(PolicyOutput { probabilities, logits })
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub state: &'a PolicyState,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub policy_gradient: f64,
    pub mean_entropy: f64,
}

/// Loss value, its parts, and the exact gradient.
pub fn loss_with_parts(
    params: &PolicyParams,
    batch: &[BatchItem<'_>],
    beta: f64,
) -> Result<(LossParts, PolicyParams), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    params.check_shapes()?;
    if !params.is_finite() {
        return Err(PolicyError::NonFinite("parameters"));
    }
    let d = params.dims;
    for item in batch {
        if item.action >= d.num_actions {
            return Err(PolicyError::ActionOutOfRange { action: item.action, num_actions: d.num_actions });
        }
        if !item.reward.is_finite() {
            return Err(PolicyError::NonFinite("reward"));
        }
        check_state(params, item.state)?;
    }

    let m = batch.len() as f64;
    let mut grad = PolicyParams::zeros(d);
    let mut pg_sum = 0.0;
    let mut ent_sum = 0.0;
    let mut d_hidden = vec![0.0; d.hidden_dim];
    let mut d_joined = vec![0.0; 2 * d.feature_dim];

    for item in batch {
        let tr = run_forward(params, item.state);
        let logp = log_softmax(&tr.logits);
        let probs: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        let h: f64 = probs.iter().zip(&logp).map(|(p, lp)| if *p > 0.0 { -p * lp } else { 0.0 }).sum();
        pg_sum += logp[item.action] * item.reward;
        ent_sum += h;

        // d/dz [-R log p_a] = R (p - onehot_a); d/dz [-beta H] = beta p_k (log p_k + H)
        let d_logits: Vec<f64> = (0..d.num_actions)
            .map(|k| {
                let onehot = if k == item.action { 1.0 } else { 0.0 };
                let pg = item.reward * (probs[k] - onehot);
                let ent = beta * probs[k] * (logp[k] + h);
                (pg + ent) / m
            })
            .collect();

        params.head.backward(&tr.hidden, &d_logits, &mut grad.head, Some(&mut d_hidden));
        for (g, &pre) in d_hidden.iter_mut().zip(&tr.hidden_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        params.core.backward(&tr.joined, &d_hidden, &mut grad.core, Some(&mut d_joined));
        let (d_embed, d_budget) = d_joined.split_at_mut(d.feature_dim);
        for (g, &pre) in d_embed.iter_mut().zip(&tr.embed_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        for (g, &pre) in d_budget.iter_mut().zip(&tr.budget_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        params.embed_proj.backward(&item.state.embedding.values, d_embed, &mut grad.embed_proj, None);
        params.budget_proj.backward(&[item.state.budget], d_budget, &mut grad.budget_proj, None);
    }

    let policy_gradient = -pg_sum / m;
    let mean_entropy = ent_sum / m;
    let parts = LossParts { total: policy_gradient - beta * mean_entropy, policy_gradient, mean_entropy };
    Ok((parts, grad))
}

pub fn loss(
    params: &PolicyParams,
    batch: &[BatchItem<'_>],
    beta: f64,
) -> Result<(f64, PolicyParams), PolicyError> {
    loss_with_parts(params, batch, beta).map(|(parts, grad)| (parts.total, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: PolicyParams,
    v: PolicyParams,
}

impl Adam {
    pub fn new(dims: PolicyDims, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: PolicyParams::zeros(dims), v: PolicyParams::zeros(dims) }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let iter = params
            .values_mut()
            .zip(grad.values())
            .zip(self.m.values_mut().zip(self.v.values_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub entropy_coeff: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Budget scale for the policy input; defaults to the largest training budget.
    pub budget_ref: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0003,
            entropy_coeff: 0.001,
            batch_size: 20_000,
            epochs: 10,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            budget_ref: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.entropy_coeff.is_finite() && self.entropy_coeff >= 0.0) {
            return bad("entropy_coeff must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if let Some(r) = self.budget_ref {
            if !(r.is_finite() && r > 0.0) {
                return bad("budget_ref must be > 0");
            }
        }
        Ok(())
    }
}

/// One `(task, budget)` group with the reward of every logged topology.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGroup {
    pub task_id: String,
    pub budget: f64,
    pub state: PolicyState,
    pub rewards: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub group: usize,
    pub action: usize,
    pub reward: f64,
}

/// Dataset prepared for training: states embedded once, rewards computed from outcomes.
///
/// Groups and samples are kept in a canonical order (task id, budget, action),
/// so results do not depend on the order experiences were logged in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub groups: Vec<TrainingGroup>,
    pub samples: Vec<TrainingSample>,
    pub budget_ref: f64,
    pub num_actions: usize,
}

impl TrainingSet {
    pub fn from_dataset(
        dataset: &ExperienceDataset,
        reward: &RewardConfig,
        embedder: &dyn Embedder,
        budget_ref: Option<f64>,
    ) -> Result<Self, PolicyError> {
        let num_actions = Topology::ALL.len();
        if dataset.experiences.is_empty() {
            return Err(PolicyError::EmptyDataset);
        }
        let budget_ref = match budget_ref {
            Some(r) => r,
            None => dataset.experiences.iter().map(|e| e.budget).fold(f64::NEG_INFINITY, f64::max),
        };
        if !(budget_ref.is_finite() && budget_ref > 0.0) {
            return Err(PolicyError::Config(format!("budget reference {budget_ref} must be > 0")));
        }

        // key: (task id, budget bits); f64 budgets are > 0 so bit order is numeric order
        let mut grouped: BTreeMap<(String, u64), GroupAcc> = BTreeMap::new();
        for exp in &dataset.experiences {
            if exp.topology >= num_actions {
                return Err(PolicyError::ActionOutOfRange { action: exp.topology, num_actions });
            }
            let r = compute_reward(
                &Outcome { success: exp.success, actual_cost: exp.actual_cost, budget: exp.budget },
                reward,
            )?;
            let entry = grouped
                .entry((exp.task_id.clone(), exp.budget.to_bits()))
                .or_insert_with(|| (exp.task_text.clone(), exp.budget, vec![None; num_actions]));
            entry.2[exp.topology] = Some(r);
        }

        let mut groups = Vec::with_capacity(grouped.len());
        let mut samples = Vec::new();
        for ((task_id, _), (text, budget, rewards)) in grouped {
            let embedding = embedder.embed(&text)?;
            let gi = groups.len();
            for (action, r) in rewards.iter().enumerate() {
                if let Some(reward) = *r {
                    samples.push(TrainingSample { group: gi, action, reward });
                }
            }
            groups.push(TrainingGroup {
                task_id,
                budget,
                state: PolicyState::new(embedding, budget, budget_ref),
                rewards,
            });
        }
        Ok(Self { groups, samples, budget_ref, num_actions })
    }

    fn batch_items(&self, indices: &[usize]) -> Vec<BatchItem<'_>> {
        indices
            .iter()
            .map(|&i| {
                let s = self.samples[i];
                BatchItem { state: &self.groups[s.group].state, action: s.action, reward: s.reward }
            })
            .collect()
    }
}

/// Expected reward of the policy: mean over groups of `sum_t pi(t|s) R(t)`.
/// Task text, budget and per-topology rewards of one group while it is assembled.
type GroupAcc = (String, f64, Vec<Option<f64>>);

pub fn evaluate(params: &PolicyParams, set: &TrainingSet) -> Result<f64, PolicyError> {
    if set.groups.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut total = 0.0;
    for g in &set.groups {
        let missing: Vec<usize> = g
            .rewards
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(i, _)| i)
            .collect();
        if !missing.is_empty() {
            return Err(PolicyError::MissingTopologies { task_id: g.task_id.clone(), budget: g.budget, missing });
        }
        let probs = forward(params, &g.state)?.probabilities;
        total += probs
            .iter()
            .zip(&g.rewards)
            .map(|(p, r)| p * r.expect("checked above"))
            .sum::<f64>();
    }
    Ok(total / set.groups.len() as f64)
}

pub fn mean_entropy(params: &PolicyParams, set: &TrainingSet) -> Result<f64, PolicyError> {
    if set.groups.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut sum = 0.0;
    for g in &set.groups {
        sum += entropy(&forward(params, &g.state)?.logits);
    }
    Ok(sum / set.groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub expected_reward: f64,
    pub mean_loss: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_expected_reward: f64,
    pub optimizer_steps: usize,
    pub samples: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub budget_ref: f64,
    pub report: TrainReport,
}

pub fn train(set: &TrainingSet, config: &TrainerConfig) -> Result<TrainOutcome, PolicyError> {
    train_with_observer(set, config, PolicyDims::default(), |_, _| {})
}

/// Training loop; `observe` sees the parameters after each epoch.
pub fn train_with_observer<F>(
    set: &TrainingSet,
    config: &TrainerConfig,
    dims: PolicyDims,
    mut observe: F,
) -> Result<TrainOutcome, PolicyError>
where
    F: FnMut(&EpochReport, &PolicyParams),
{
    config.validate()?;
    if set.samples.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    if dims.num_actions != set.num_actions {
        return Err(PolicyError::Shape(format!(
            "policy has {} actions, dataset {}",
            dims.num_actions, set.num_actions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = PolicyParams::init(dims, &mut rng);
    let mut adam = Adam::new(dims, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);

    let mut best_params = params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..set.samples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let items = set.batch_items(chunk);
            let (parts, grad) = loss_with_parts(&params, &items, config.entropy_coeff)?;
            adam.step(&mut params, &grad);
            loss_sum += parts.total;
            batches += 1;
        }
        if !params.is_finite() {
            return Err(PolicyError::NonFinite("parameters after update"));
        }
        let score = evaluate(&params, set)?;
        let report = EpochReport {
            epoch,
            expected_reward: score,
            mean_loss: loss_sum / batches as f64,
            mean_entropy: mean_entropy(&params, set)?,
        };
        observe(&report, &params);
        if score > best_score {
            best_score = score;
            best_params = params.clone();
            best_epoch = epoch;
        }
        epochs.push(report);
    }

    Ok(TrainOutcome {
        params: best_params,
        budget_ref: set.budget_ref,
        report: TrainReport {
            epochs,
            best_epoch,
            best_expected_reward: best_score,
            optimizer_steps: adam.steps() as usize,
            samples: set.samples.len(),
            groups: set.groups.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Greedy,
    Sample,
}

/// Argmax with ties going to the lowest index.
pub fn argmax(probabilities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_index(probabilities: &[f64], seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random::<f64>() * probabilities.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

pub fn select_topology(
    params: &PolicyParams,
    state: &PolicyState,
    mode: SelectMode,
    seed: u64,
) -> Result<usize, PolicyError> {
    let probs = forward(params, state)?.probabilities;
    Ok(match mode {
        SelectMode::Greedy => argmax(&probs),
        SelectMode::Sample => sample_index(&probs, seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub seed: u64,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub topologies: Vec<String>,
    pub budget_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    /// `[outputs, inputs]`
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub config: PolicySnapshot,
    pub layers: Vec<LayerRecord>,
}

/// Trained parameters together with what is needed to build their input state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub params: PolicyParams,
    pub budget_ref: f64,
    pub seed: u64,
}

impl PolicyModel {
    pub fn state(&self, embedding: TaskEmbedding, budget: f64) -> PolicyState {
        PolicyState::new(embedding, budget, self.budget_ref)
    }

    pub fn to_file(&self) -> PolicyFile {
        let d = self.params.dims;
        PolicyFile {
            version: POLICY_FILE_VERSION,
            config: PolicySnapshot {
                seed: self.seed,
                embed_dim: d.embed_dim,
                feature_dim: d.feature_dim,
                hidden_dim: d.hidden_dim,
                topologies: Topology::ALL.iter().map(|t| t.name().to_string()).collect(),
                budget_ref: self.budget_ref,
            },
            layers: self
                .params
                .layers()
                .iter()
                .map(|(name, l)| LayerRecord {
                    name: name.to_string(),
                    shape: [l.outputs, l.inputs],
                    weight: l.weight.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self, String> {
        if file.version != POLICY_FILE_VERSION {
            return Err(format!("unsupported version {}", file.version));
        }
        let expected: Vec<String> = Topology::ALL.iter().map(|t| t.name().to_string()).collect();
        if file.config.topologies != expected {
            return Err(format!(
                "topology list {:?} does not match {:?}",
                file.config.topologies, expected
            ));
        }
        let dims = PolicyDims {
            embed_dim: file.config.embed_dim,
            feature_dim: file.config.feature_dim,
            hidden_dim: file.config.hidden_dim,
            num_actions: expected.len(),
        };
        let mut params = PolicyParams::zeros(dims);
        if file.layers.len() != LAYER_NAMES.len() {
            return Err(format!("expected {} layers, found {}", LAYER_NAMES.len(), file.layers.len()));
        }
        for (slot, rec) in params.layers_mut().into_iter().zip(&file.layers) {
            if rec.shape != [slot.outputs, slot.inputs]
                || rec.weight.len() != slot.weight.len()
                || rec.bias.len() != slot.bias.len()
            {
                return Err(format!(
                    "layer {} has shape {:?}, expected [{}, {}]",
                    rec.name, rec.shape, slot.outputs, slot.inputs
                ));
            }
            slot.weight.clone_from(&rec.weight);
            slot.bias.clone_from(&rec.bias);
        }
        for (rec, name) in file.layers.iter().zip(LAYER_NAMES) {
            if rec.name != name {
                return Err(format!("layer `{}` where `{name}` was expected", rec.name));
            }
        }
        if !params.is_finite() {
            return Err("non-finite parameter".into());
        }
        if !(file.config.budget_ref.is_finite() && file.config.budget_ref > 0.0) {
            return Err("budget_ref must be > 0".into());
        }
        Ok(Self { params, budget_ref: file.config.budget_ref, seed: file.config.seed })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("policy serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_json() + "\n").map_err(|e| PolicyError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let err = |message: String| PolicyError::File { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: PolicyFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::from_file(file).map_err(err)
    }
}
