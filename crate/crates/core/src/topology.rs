//! Collaboration topologies, role assignment, and ledgered execution.
//!
//! Every call's cost is committed to the run ledger as soon as the call
//! returns. Once the ledger exceeds the budget no further call is made.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendRegistry, CallContext, CallRequest};
use crate::catalog::{estimate_cost, ModelCatalog, ModelSpec, DEFAULT_INPUT_TOKENS};
use crate::provision::ProvisionSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Linear,
    Star,
    Feedback,
    PlannerDriven,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Topology::Linear, Topology::Star, Topology::Feedback, Topology::PlannerDriven];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Topology> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::Linear => "linear",
            Topology::Star => "star",
            Topology::Feedback => "feedback",
            Topology::PlannerDriven => "planner_driven",
        }
    }

    /// Smallest pool that can staff this topology.
    pub fn min_instances(self) -> usize {
        match self {
            Topology::PlannerDriven => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match norm.as_str() {
            "linear" | "0" => Ok(Topology::Linear),
            "star" | "1" => Ok(Topology::Star),
            "feedback" | "2" => Ok(Topology::Feedback),
            "plannerdriven" | "planner" | "3" => Ok(Topology::PlannerDriven),
            _ => Err(format!("unknown topology `{s}` (expected linear, star, feedback, planner_driven)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Executor,
    Critic,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Planner => "planner",
            Role::Executor => "executor",
            Role::Critic => "critic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub text: String,
    /// Reference answer; without one a run's success stays undetermined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("{topology} needs at least {required} instances, pool has {available} (short by {})", required - available)]
    TooFewInstances { topology: Topology, required: usize, available: usize },
    #[error("provisioned tier {0} has no model in the catalog")]
    UnknownTier(u32),
    #[error("solution has {solution} tiers but catalog has {catalog}")]
    TierMismatch { solution: usize, catalog: usize },
}

/// Provisioned instances, highest tier first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub instances: Vec<ModelSpec>,
}

impl Pool {
    /// `counts[i]` instances of tier `i + 1`'s representative model.
    pub fn from_solution(solution: &ProvisionSolution, catalog: &ModelCatalog) -> Result<Pool, TopologyError> {
        if solution.counts.len() != catalog.num_tiers() {
            return Err(TopologyError::TierMismatch { solution: solution.counts.len(), catalog: catalog.num_tiers() });
        }
        let mut instances = Vec::new();
        for (i, &n) in solution.counts.iter().enumerate() {
            let tier = i as u32 + 1;
            let model = catalog.tier_representative(tier).ok_or(TopologyError::UnknownTier(tier))?;
            instances.extend(std::iter::repeat_n(model.clone(), n as usize));
        }
        Ok(Pool { instances })
    }

    /// Stable-sorts the given models by tier.
    pub fn from_models(mut instances: Vec<ModelSpec>) -> Pool {
        instances.sort_by_key(|m| m.tier);
        Pool { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub model: ModelSpec,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub topology: Topology,
    pub members: Vec<Member>,
}

impl RoleAssignment {
    fn indices(&self, role: Role) -> Vec<usize> {
        self.members.iter().enumerate().filter(|(_, m)| m.role == role).map(|(i, _)| i).collect()
    }

    pub fn executors(&self) -> Vec<usize> {
        self.indices(Role::Executor)
    }

    pub fn critic(&self) -> Option<usize> {
        self.indices(Role::Critic).first().copied()
    }

    pub fn planner(&self) -> Option<usize> {
        self.indices(Role::Planner).first().copied()
    }
}

pub fn assign_roles(pool: &Pool, topology: Topology) -> Result<RoleAssignment, TopologyError> {
    let required = topology.min_instances();
    if pool.len() < required {
        return Err(TopologyError::TooFewInstances { topology, required, available: pool.len() });
    }
    let lead: &[Role] = match topology {
        Topology::Linear | Topology::Star => &[],
        Topology::Feedback => &[Role::Critic],
        Topology::PlannerDriven => &[Role::Planner, Role::Critic],
    };
    let members = pool
        .instances
        .iter()
        .enumerate()
        .map(|(i, m)| Member { model: m.clone(), role: lead.get(i).copied().unwrap_or(Role::Executor) })
        .collect();
    Ok(RoleAssignment { topology, members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleTokens {
    pub planner: u32,
    pub executor: u32,
    pub critic: u32,
}

impl Default for RoleTokens {
    fn default() -> Self {
        Self { planner: 384, executor: 384, critic: 384 }
    }
}

impl RoleTokens {
    pub fn get(&self, role: Role) -> u32 {
        match role {
            Role::Planner => self.planner,
            Role::Executor => self.executor,
            Role::Critic => self.critic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub max_tokens: RoleTokens,
    pub temperature: f64,
    pub max_feedback_rounds: u32,
    pub max_replans: u32,
    /// When set, skip a call whose worst case (`prompt_estimate` in, role
    /// `max_tokens` out) would overrun the remaining budget by more than this.
    pub precheck_slack: Option<f64>,
    pub prompt_estimate: u64,
    pub run_seed: u64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            max_tokens: RoleTokens::default(),
            temperature: 0.0,
            max_feedback_rounds: 3,
            max_replans: 2,
            precheck_slack: None,
            prompt_estimate: DEFAULT_INPUT_TOKENS,
            run_seed: 42,
        }
    }
}

// ---------------------------------------------------------------------------
// evaluation

pub trait Evaluator: Send + Sync {
    /// Canonical form used for voting and comparison.
    fn normalize(&self, output: &str) -> Option<String>;

    fn judge(&self, output: &str, reference: &str) -> Result<bool, String> {
        let got = self.normalize(output).ok_or_else(|| "no answer found in output".to_string())?;
        let want = self.normalize(reference).ok_or_else(|| format!("unusable reference answer `{reference}`"))?;
        Ok(got == want)
    }
}

/// Text after the last `####` marker if present, otherwise the last number in the output.
#[derive(Debug, Clone, Copy, Default)]
pub struct NumericEvaluator;

fn scan_numbers(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        let accept = c.is_ascii_digit()
            || (c == '-' && cur.is_empty() && next_digit)
            || ((c == '.' || c == ',') && !cur.is_empty() && next_digit);
        if accept {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn canonical_number(raw: &str) -> Option<String> {
    let v: f64 = raw.replace(',', "").parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    if v == v.trunc() && v.abs() < 1e15 {
        Some(format!("{}", v as i64))
    } else {
        Some(format!("{v}"))
    }
}

impl Evaluator for NumericEvaluator {
    fn normalize(&self, output: &str) -> Option<String> {
        let scope = match output.rfind("####") {
            Some(i) => &output[i + 4..],
            None => output,
        };
        let nums = scan_numbers(scope);
        let pick = if output.contains("####") { nums.first() } else { nums.last() };
        pick.and_then(|n| canonical_number(n))
    }
}

/// Trimmed literal comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct StringEvaluator;

impl Evaluator for StringEvaluator {
    fn normalize(&self, output: &str) -> Option<String> {
        let t = output.trim();
        (!t.is_empty()).then(|| t.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Numeric,
    String,
}

impl EvaluatorKind {
    pub fn build(self) -> Box<dyn Evaluator> {
        match self {
            EvaluatorKind::Numeric => Box::new(NumericEvaluator),
            EvaluatorKind::String => Box::new(StringEvaluator),
        }
    }
}

// ---------------------------------------------------------------------------
// traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// Position in the role assignment.
    pub instance: usize,
    pub model: String,
    pub role: Role,
    pub step: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub unit_cost: f64,
    /// Ledger total before this call started.
    pub cost_before: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Backend,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub task_id: String,
    pub topology: Topology,
    pub budget: f64,
    pub calls: Vec<CallRecord>,
    pub cumulative_cost: f64,
    pub final_answer: Option<String>,
    /// `None` when there was no reference answer to judge against.
    pub success: Option<bool>,
    pub oob: bool,
    pub terminated_early: bool,
    /// A call was skipped because its worst case would overrun the budget.
    #[serde(default)]
    pub precheck_stopped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation_note: Option<String>,
}

impl RunTrace {
    pub fn succeeded(&self) -> bool {
        self.success == Some(true)
    }
}

pub fn count_oob(traces: &[RunTrace]) -> usize {
    traces.iter().filter(|t| t.oob).count()
}

// ---------------------------------------------------------------------------
// execution

const EXECUTOR_SYSTEM: &str = "You are a careful problem solver. Work through the task and end your reply \
with the final answer on its own line in the form `#### <answer>`.";
const CRITIC_SYSTEM: &str = "You review a proposed solution. Reply with ACCEPT on the first line if it is \
correct. Otherwise reply with REJECT on the first line followed by what must be fixed.";
const PLANNER_SYSTEM: &str = "You plan the solution of a task. Reply only with numbered steps, one per \
line (`1. ...`), that executors can carry out in order.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

/// First non-empty line decides; anything other than ACCEPT counts as a rejection.
pub fn parse_verdict(text: &str) -> Verdict {
    let first = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    if first.to_ascii_uppercase().starts_with("ACCEPT") {
        Verdict::Accept
    } else {
        Verdict::Reject
    }
}

/// Numbered lines such as `1. x`, `2) y` or `Step 3: z`.
pub fn parse_plan(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let l = line.trim();
            let l = l.strip_prefix("Step ").or_else(|| l.strip_prefix("step ")).unwrap_or(l);
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits == 0 {
                return None;
            }
            let rest = &l[digits..];
            let rest = rest.strip_prefix(['.', ')', ':'])?;
            let step = rest.trim();
            (!step.is_empty()).then(|| step.to_string())
        })
        .collect()
}

struct Run<'a> {
    task: &'a TaskSpec,
    assignment: &'a RoleAssignment,
    budget: f64,
    registry: &'a BackendRegistry,
    config: &'a ExecConfig,
    calls: Vec<CallRecord>,
    cost: f64,
    steps: BTreeMap<Role, u32>,
    over: bool,
    precheck_stopped: bool,
    failure: Option<RunFailure>,
    last_executor_output: Option<String>,
}

impl Run<'_> {
    fn halted(&self) -> bool {
        self.over || self.precheck_stopped || self.failure.is_some()
    }

    /// One ledgered call. `None` if the call did not happen or failed.
    fn call(&mut self, instance: usize, system: &str, user: String) -> Option<String> {
        if self.halted() {
            return None;
        }
        let member = &self.assignment.members[instance];
        let role = member.role;
        let max_tokens = self.config.max_tokens.get(role);
        if let Some(slack) = self.config.precheck_slack {
            let worst = estimate_cost(&member.model, self.config.prompt_estimate, max_tokens as u64).unit_cost;
            if self.cost + worst > self.budget + slack {
                self.precheck_stopped = true;
                return None;
            }
        }
        let step = {
            let s = self.steps.entry(role).or_insert(0);
            *s += 1;
            *s
        };
        let backend = match self.registry.resolve(&member.model.backend_id) {
            Ok(b) => b,
            Err(e) => {
                self.fail(&e);
                return None;
            }
        };
        let mut request = CallRequest {
            model: member.model.name.clone(),
            system: system.to_string(),
            user,
            max_tokens,
            temperature: self.config.temperature,
            context: CallContext {
                run_seed: self.config.run_seed,
                task_id: self.task.id.clone(),
                topology: self.assignment.topology,
                role,
                step,
                attempt: 0,
            },
        };
        let response = loop {
            match backend.invoke(&request) {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && request.context.attempt == 0 => {
                    std::thread::sleep(backend.retry_backoff(0));
                    request.context.attempt = 1;
                }
                Err(e) => {
                    self.fail(&e);
                    return None;
                }
            }
        };

        let unit_cost = estimate_cost(&member.model, response.prompt_tokens, response.completion_tokens).unit_cost;
        self.calls.push(CallRecord {
            instance,
            model: member.model.name.clone(),
            role,
            step,
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            unit_cost,
            cost_before: self.cost,
        });
        self.cost += unit_cost;
        if role == Role::Executor {
            self.last_executor_output = Some(response.text.clone());
        }
        if self.cost > self.budget {
            self.over = true;
        }
        Some(response.text)
    }

    fn fail(&mut self, e: &BackendError) {
        let kind = if e.is_config() { FailureKind::Config } else { FailureKind::Backend };
        self.failure = Some(RunFailure { kind, message: e.to_string() });
    }

    fn task_prompt(&self) -> String {
        format!("Task:\n{}", self.task.text)
    }

    fn linear(&mut self) -> Option<String> {
        let mut prev: Option<String> = None;
        for e in self.assignment.executors() {
            let user = match &prev {
                None => self.task_prompt(),
                Some(p) => format!("{}\n\nPrevious agent's answer:\n{p}\n\nBuild on it and give your answer.", self.task_prompt()),
            };
            let out = self.call(e, EXECUTOR_SYSTEM, user);
            if out.is_some() {
                prev = out;
            }
            if self.halted() {
                break;
            }
        }
        prev
    }

    fn star(&mut self, evaluator: &dyn Evaluator) -> Option<String> {
        let mut answers = Vec::new();
        for e in self.assignment.executors() {
            let user = self.task_prompt();
            if let Some(out) = self.call(e, EXECUTOR_SYSTEM, user) {
                answers.push(out);
            }
            if self.halted() {
                break;
            }
        }
        majority(&answers, evaluator)
    }

    /// Executors relay a draft; the critic audits and the last executor revises.
    fn feedback(&mut self) -> Option<String> {
        let critic = self.assignment.critic().expect("feedback assignment has a critic");
        let executors = self.assignment.executors();
        let reviser = *executors.last().expect("at least one executor");
        let mut draft = self.linear()?;
        if self.halted() {
            return Some(draft);
        }
        for _ in 0..self.config.max_feedback_rounds {
            let review = format!("{}\n\nProposed solution:\n{draft}", self.task_prompt());
            let Some(verdict) = self.call(critic, CRITIC_SYSTEM, review) else { break };
            if parse_verdict(&verdict) == Verdict::Accept || self.halted() {
                break;
            }
            let user = format!(
                "{}\n\nYour previous answer:\n{draft}\n\nReviewer feedback:\n{verdict}\n\nRevise your answer.",
                self.task_prompt()
            );
            match self.call(reviser, EXECUTOR_SYSTEM, user) {
                Some(revised) => draft = revised,
                None => break,
            }
            if self.halted() {
                break;
            }
        }
        Some(draft)
    }

    fn planner_driven(&mut self) -> Option<String> {
        let planner = self.assignment.planner().expect("planner assignment has a planner");
        let critic = self.assignment.critic().expect("planner assignment has a critic");
        let executors = self.assignment.executors();
        let mut replans = 0;
        let mut feedback: Option<String> = None;
        let mut result: Option<String> = None;
        loop {
            let mut user = self.task_prompt();
            if let Some(f) = &feedback {
                user.push_str(&format!("\n\nThe previous plan failed:\n{f}\n\nWrite a new plan."));
            }
            let plan_text = self.call(planner, PLANNER_SYSTEM, user)?;
            if self.halted() {
                return result;
            }
            let steps = parse_plan(&plan_text);
            if steps.is_empty() {
                if replans < self.config.max_replans {
                    replans += 1;
                    feedback = Some("the plan had no numbered steps".into());
                    continue;
                }
                if result.is_none() {
                    // no usable plan at all: one executor answers directly
                    let user = self.task_prompt();
                    result = self.call(executors[0], EXECUTOR_SYSTEM, user);
                }
                return result;
            }

            let mut step_out: Option<String> = None;
            for (k, step) in steps.iter().enumerate() {
                let mut user = format!("{}\n\nPlan:\n{plan_text}\n\nCarry out step {}: {step}", self.task_prompt(), k + 1);
                if let Some(p) = &step_out {
                    user.push_str(&format!("\n\nResult so far:\n{p}"));
                }
                let out = self.call(executors[k % executors.len()], EXECUTOR_SYSTEM, user);
                if out.is_some() {
                    step_out = out;
                }
                if self.halted() {
                    break;
                }
            }
            if step_out.is_some() {
                result = step_out;
            }
            if self.halted() || replans >= self.config.max_replans {
                return result;
            }
            let draft = result.clone().unwrap_or_default();
            let review = format!("{}\n\nPlan:\n{plan_text}\n\nResult:\n{draft}", self.task_prompt());
            let verdict = self.call(critic, CRITIC_SYSTEM, review)?;
            if parse_verdict(&verdict) == Verdict::Accept || self.halted() {
                return result;
            }
            replans += 1;
            feedback = Some(verdict);
        }
    }
}

/// Most common normalized answer; ties go to the earliest (highest-weight) answerer.
pub fn majority(answers: &[String], evaluator: &dyn Evaluator) -> Option<String> {
    let keys: Vec<String> =
        answers.iter().map(|a| evaluator.normalize(a).unwrap_or_else(|| a.trim().to_string())).collect();
    let mut best: Option<(usize, usize)> = None; // (count, first index)
    for (i, k) in keys.iter().enumerate() {
        if keys[..i].contains(k) {
            continue;
        }
        let count = keys.iter().filter(|x| *x == k).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, i));
        }
    }
    best.map(|(_, i)| answers[i].clone())
}

pub fn execute(
    task: &TaskSpec,
    assignment: &RoleAssignment,
    budget: f64,
    registry: &BackendRegistry,
    evaluator: &dyn Evaluator,
    config: &ExecConfig,
) -> RunTrace {
    let mut run = Run {
        task,
        assignment,
        budget,
        registry,
        config,
        calls: Vec::new(),
        cost: 0.0,
        steps: BTreeMap::new(),
        over: false,
        precheck_stopped: false,
        failure: None,
        last_executor_output: None,
    };
    let answer = match assignment.topology {
        Topology::Linear => run.linear(),
        Topology::Star => run.star(evaluator),
        Topology::Feedback => run.feedback(),
        Topology::PlannerDriven => run.planner_driven(),
    };
    let final_answer = if run.over && assignment.topology != Topology::Star {
        run.last_executor_output.clone()
    } else {
        answer.or_else(|| run.last_executor_output.clone())
    };

    let mut note = None;
    let success = if run.failure.is_some() {
        Some(false)
    } else {
        match (&final_answer, &task.answer) {
            (None, _) => Some(false),
            (Some(_), None) => None,
            (Some(out), Some(reference)) => match evaluator.judge(out, reference) {
                Ok(ok) => Some(ok),
                Err(reason) => {
                    note = Some(reason);
                    Some(false)
                }
            },
        }
    };

    RunTrace {
        task_id: task.id.clone(),
        topology: assignment.topology,
        budget,
        cumulative_cost: run.cost,
        oob: run.cost > budget,
        terminated_early: run.over,
        precheck_stopped: run.precheck_stopped,
        calls: run.calls,
        final_answer,
        success,
        failure: run.failure,
        evaluation_note: note,
    }
}
