//! Command-line front end: provision, collect, train, run, report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 infeasible provisioning.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendRegistry, MockScript};
use crate::catalog::{estimate_output_tokens, ModelCatalog, DEFAULT_INPUT_TOKENS};
use crate::dataset::{collect, CollectSetup, DatasetError, ExperienceDataset};
use crate::embedder::{Embedder, HashingEmbedder, RemoteEmbedder, DEFAULT_EMBED_DIM};
use crate::policy::{self, PolicyDims, PolicyModel, TrainerConfig, TrainingSet};
use crate::provision::{compute_weights, solve, DecisionWeights, ProvisionProblem, ProvisionSolution};
use crate::reward::RewardConfig;
use crate::topology::{
    assign_roles, execute, EvaluatorKind, ExecConfig, FailureKind, Pool, RoleTokens, RunTrace, TaskSpec, Topology,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

pub const PROVISION_FILE: &str = "provision.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const TRACE_FILE: &str = "trace.json";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_ERROR,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Infeasible(m) => m,
        }
    }
}

fn cfg_err(m: impl std::fmt::Display) -> CliError {
    CliError::Config(m.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "agentbudget", version, about = "Budget-aware multi-agent LLM orchestration")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Budget in cost units; replaces the configured budget list.
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for collection.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Use the mock script from the task profile instead of HTTP backends.
    #[arg(long, global = true)]
    pub mock: bool,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the provisioning problem for each budget.
    Provision {
        /// Print the decision weights.
        #[arg(long)]
        explain: bool,
    },
    /// Execute every topology on every task and write the experience dataset.
    Collect,
    /// Train the topology policy on the collected dataset.
    Train,
    /// Provision, pick a topology and execute tasks.
    Run {
        /// Free-form task text.
        #[arg(long, conflicts_with = "task_id")]
        task: Option<String>,
        /// Id of a task in the profile; without --task or --task-id every profile task runs.
        #[arg(long)]
        task_id: Option<String>,
        /// Skip the policy and use this topology.
        #[arg(long)]
        topology: Option<String>,
        /// Policy weights; defaults to the output directory's policy.json.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Summarize a trace file.
    Report {
        /// Defaults to the output directory's traces.jsonl.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    /// Service named by `AGENTBUDGET_EMBED_URL`.
    Remote,
}

fn default_seed() -> u64 {
    42
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_cap() -> u32 {
    crate::provision::DEFAULT_INSTANCE_CAP
}
fn default_min_agents() -> u32 {
    crate::provision::DEFAULT_MIN_AGENTS
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: PathBuf,
    pub profile: PathBuf,
    pub budgets: Vec<f64>,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cap")]
    pub instance_cap: u32,
    #[serde(default = "default_min_agents")]
    pub min_agents: u32,
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub embedder: EmbedderKind,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_t_in() -> u64 {
    DEFAULT_INPUT_TOKENS
}
fn default_rounds() -> u32 {
    3
}
fn default_replans() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProfile {
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_t_in")]
    pub t_in: u64,
    /// Output-token bound; `output_samples` takes precedence.
    #[serde(default)]
    pub t_out: Option<u64>,
    #[serde(default)]
    pub output_samples: Option<Vec<u64>>,
    #[serde(default)]
    pub max_tokens: RoleTokens,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    #[serde(default = "default_rounds")]
    pub max_feedback_rounds: u32,
    #[serde(default = "default_replans")]
    pub max_replans: u32,
    #[serde(default)]
    pub precheck_slack: Option<f64>,
    #[serde(default)]
    pub mock: Option<MockScript>,
}

impl TaskProfile {
    pub fn t_out(&self) -> CliResult<u64> {
        match &self.output_samples {
            Some(samples) => estimate_output_tokens(samples).map_err(cfg_err),
            None => Ok(self.t_out.unwrap_or(self.max_tokens.executor as u64)),
        }
    }

    pub fn exec_config(&self, seed: u64) -> ExecConfig {
        ExecConfig {
            max_tokens: self.max_tokens,
            max_feedback_rounds: self.max_feedback_rounds,
            max_replans: self.max_replans,
            precheck_slack: self.precheck_slack,
            prompt_estimate: self.t_in,
            run_seed: seed,
            ..ExecConfig::default()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| cfg_err(format!("invalid {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| cfg_err(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| cfg_err(format!("cannot write {}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Everything a command needs, with flags applied over the config file.
struct Context {
    config: RunConfig,
    catalog: ModelCatalog,
    profile: TaskProfile,
}

impl Context {
    fn load(cli: &Cli) -> CliResult<Context> {
        let path = cli.config.as_ref().ok_or_else(|| cfg_err("--config is required for this command"))?;
        let mut config: RunConfig = read_json(path, "config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        config.catalog = resolve(&config.catalog);
        config.profile = resolve(&config.profile);
        config.output_dir = resolve(&config.output_dir);

        if let Some(b) = cli.budget {
            config.budgets = vec![b];
        }
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        if let Some(j) = cli.jobs {
            config.jobs = j;
        }
        if cli.mock {
            config.mock = true;
        }
        if let Some(o) = &cli.output_dir {
            config.output_dir = o.clone();
        }
        config.trainer.seed = config.seed;
        if config.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(cfg_err("budgets must be > 0"));
        }
        if config.jobs == 0 {
            return Err(cfg_err("jobs must be >= 1"));
        }
        config.reward.validate().map_err(cfg_err)?;

        let catalog = ModelCatalog::load(&config.catalog).map_err(cfg_err)?;
        let profile: TaskProfile = read_json(&config.profile, "task profile")?;
        if profile.t_in == 0 {
            return Err(cfg_err("t_in must be > 0"));
        }
        Ok(Context { config, catalog, profile })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn budgets(&self) -> CliResult<&[f64]> {
        if self.config.budgets.is_empty() {
            return Err(cfg_err("no budget configured; set `budgets` or pass --budget"));
        }
        Ok(&self.config.budgets)
    }

    fn registry(&self) -> CliResult<BackendRegistry> {
        if self.config.mock {
            let script = self
                .profile
                .mock
                .clone()
                .ok_or_else(|| cfg_err("mock mode needs a `mock` script in the task profile"))?;
            Ok(BackendRegistry::mock(script))
        } else {
            Ok(BackendRegistry::from_catalog(&self.catalog))
        }
    }

    fn embedder(&self) -> CliResult<Box<dyn Embedder>> {
        Ok(match self.config.embedder {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(DEFAULT_EMBED_DIM)),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::from_env(DEFAULT_EMBED_DIM).map_err(cfg_err)?),
        })
    }

    fn problem(&self, budget: f64) -> CliResult<ProvisionProblem> {
        let t_out = self.profile.t_out()?;
        Ok(ProvisionProblem::new(budget, self.catalog.tier_costs(self.profile.t_in, t_out))
            .with_cap(self.config.instance_cap)
            .with_min_agents(self.config.min_agents))
    }

    fn solve(&self, budget: f64) -> CliResult<(ProvisionProblem, DecisionWeights, ProvisionSolution)> {
        let problem = self.problem(budget)?;
        let weights = compute_weights(&problem).map_err(cfg_err)?;
        let solution = solve(&problem).map_err(cfg_err)?;
        Ok((problem, weights, solution))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    tier: u32,
    model: String,
    count: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvisionRecord {
    budget: f64,
    t_in: u64,
    t_out: u64,
    tier_costs: Vec<f64>,
    weights: DecisionWeights,
    solution: ProvisionSolution,
    pool: Vec<PoolEntry>,
}

fn cmd_provision(ctx: &Context, explain: bool, out: &mut dyn Write) -> CliResult<()> {
    let mut records = Vec::new();
    let mut infeasible = Vec::new();
    for &budget in ctx.budgets()? {
        let (problem, weights, solution) = ctx.solve(budget)?;
        let _ = writeln!(out, "budget {budget}:");
        if explain {
            for (i, (w, c)) in weights.weights.iter().zip(&problem.tier_costs).enumerate() {
                let _ = writeln!(out, "  tier {} unit cost {c} weight W = {w}", i + 1);
            }
        }
        let pool: Vec<PoolEntry> = solution
            .counts
            .iter()
            .enumerate()
            .map(|(i, &count)| {
                let tier = i as u32 + 1;
                let model = ctx.catalog.tier_representative(tier).map(|m| m.name.clone()).unwrap_or_default();
                PoolEntry { tier, model, count }
            })
            .collect();
        if solution.feasible {
            for p in pool.iter().filter(|p| p.count > 0) {
                let _ = writeln!(out, "  {} x {} (tier {})", p.count, p.model, p.tier);
            }
            let _ = writeln!(out, "  total cost {} weight {}", solution.total_cost, solution.total_weight);
        } else {
            let reason = solution.reason.clone().unwrap_or_else(|| "infeasible".into());
            let _ = writeln!(out, "  infeasible: {reason}");
            infeasible.push(format!("budget {budget}: {reason}"));
        }
        records.push(ProvisionRecord {
            budget,
            t_in: ctx.profile.t_in,
            t_out: ctx.profile.t_out()?,
            tier_costs: problem.tier_costs.clone(),
            weights,
            solution,
            pool,
        });
    }
    write_file(&ctx.out(PROVISION_FILE), &pretty(&records))?;
    if infeasible.is_empty() {
        Ok(())
    } else {
        Err(CliError::Infeasible(infeasible.join("; ")))
    }
}

fn cmd_collect(ctx: &Context, out: &mut dyn Write) -> CliResult<()> {
    let registry = ctx.registry()?;
    let evaluator = ctx.profile.evaluator.build();
    let exec = ctx.profile.exec_config(ctx.config.seed);
    let setup = CollectSetup {
        catalog: &ctx.catalog,
        registry: &registry,
        evaluator: evaluator.as_ref(),
        exec: &exec,
        t_in: ctx.profile.t_in,
        t_out: ctx.profile.t_out()?,
        instance_cap: ctx.config.instance_cap,
        min_agents: ctx.config.min_agents,
        seed: ctx.config.seed,
        jobs: ctx.config.jobs,
    };
    let budgets = if ctx.profile.tasks.is_empty() { &[][..] } else { ctx.budgets()? };
    let dataset = collect(&ctx.profile.tasks, budgets, &setup).map_err(|e| match e {
        DatasetError::Provision { .. } => CliError::Infeasible(e.to_string()),
        other => cfg_err(other),
    })?;
    let path = ctx.out(DATASET_FILE);
    write_file(&path, &dataset.to_jsonl())?;
    let successes = dataset.experiences.iter().filter(|e| e.success).count();
    let _ = writeln!(
        out,
        "collected {} experiences ({} tasks x {} budgets x 4 topologies), {} successful -> {}",
        dataset.len(),
        ctx.profile.tasks.len(),
        budgets.len(),
        successes,
        path.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Context, out: &mut dyn Write) -> CliResult<()> {
    let path = ctx.out(DATASET_FILE);
    let dataset = ExperienceDataset::load(&path).map_err(cfg_err)?;
    let embedder = ctx.embedder()?;
    let set = TrainingSet::from_dataset(&dataset, &ctx.config.reward, embedder.as_ref(), ctx.config.trainer.budget_ref)
        .map_err(cfg_err)?;
    let dims = PolicyDims { embed_dim: embedder.dim(), ..PolicyDims::default() };
    let outcome = policy::train_with_observer(&set, &ctx.config.trainer, dims, |_, _| {}).map_err(cfg_err)?;
    for e in &outcome.report.epochs {
        let _ = writeln!(
            out,
            "epoch {:>3}  expected reward {:.6}  loss {:.6}  entropy {:.4}",
            e.epoch, e.expected_reward, e.mean_loss, e.mean_entropy
        );
    }
    let _ = writeln!(
        out,
        "best epoch {} (expected reward {:.6})",
        outcome.report.best_epoch, outcome.report.best_expected_reward
    );
    let model = PolicyModel { params: outcome.params, budget_ref: outcome.budget_ref, seed: ctx.config.seed };
    write_file(&ctx.out(POLICY_FILE), &(model.to_json() + "\n"))?;
    write_file(&ctx.out(TRAIN_REPORT_FILE), &pretty(&outcome.report))?;
    Ok(())
}

/// Greedy choice restricted to topologies the pool can staff.
fn choose_topology(probabilities: &[f64], pool: &Pool) -> Option<Topology> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probabilities.iter().enumerate() {
        let t = Topology::from_index(i)?;
        if pool.len() < t.min_instances() {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best.and_then(|(i, _)| Topology::from_index(i))
}

fn cmd_run(
    ctx: &Context,
    task: Option<&str>,
    task_id: Option<&str>,
    topology: Option<&str>,
    weights: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let budget = ctx.budgets()?[0];
    let tasks: Vec<TaskSpec> = match (task, task_id) {
        (Some(text), _) => vec![TaskSpec { id: "cli".into(), text: text.to_string(), answer: None }],
        (None, Some(id)) => vec![ctx
            .profile
            .tasks
            .iter()
            .find(|t| t.id == id)
            .cloned()
            .ok_or_else(|| cfg_err(format!("no task `{id}` in the profile")))?],
        (None, None) => ctx.profile.tasks.clone(),
    };
    let forced = topology.map(|t| t.parse::<Topology>().map_err(cfg_err)).transpose()?;
    let model = match forced {
        Some(_) => None,
        None => {
            let path = weights.map(Path::to_path_buf).unwrap_or_else(|| ctx.out(POLICY_FILE));
            if !path.exists() {
                return Err(cfg_err(format!(
                    "no policy weights at {}; run `train` first or pass --topology",
                    path.display()
                )));
            }
            Some(PolicyModel::load(&path).map_err(cfg_err)?)
        }
    };

    let (_, _, solution) = ctx.solve(budget)?;
    if !solution.feasible {
        return Err(CliError::Infeasible(format!(
            "budget {budget}: {}",
            solution.reason.unwrap_or_else(|| "infeasible".into())
        )));
    }
    let pool = Pool::from_solution(&solution, &ctx.catalog).map_err(cfg_err)?;
    let registry = ctx.registry()?;
    let evaluator = ctx.profile.evaluator.build();
    let exec = ctx.profile.exec_config(ctx.config.seed);
    let embedder = if model.is_some() { Some(ctx.embedder()?) } else { None };

    let mut traces = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let topo = match (forced, &model, &embedder) {
            (Some(f), _, _) => f,
            (None, Some(m), Some(e)) => {
                let state = m.state(e.embed(&t.text).map_err(cfg_err)?, budget);
                let probs = policy::forward(&m.params, &state).map_err(cfg_err)?.probabilities;
                choose_topology(&probs, &pool).ok_or_else(|| cfg_err("no topology can be staffed by the pool"))?
            }
            _ => unreachable!("policy model loaded when no topology is forced"),
        };
        let assignment = assign_roles(&pool, topo).map_err(cfg_err)?;
        let trace = execute(t, &assignment, budget, &registry, evaluator.as_ref(), &exec);
        if let Some(f) = &trace.failure {
            if f.kind == FailureKind::Config {
                return Err(cfg_err(format!("task `{}`: {}", t.id, f.message)));
            }
        }
        let success = match trace.success {
            Some(true) => "correct",
            Some(false) => "incorrect",
            None => "not graded",
        };
        let _ = writeln!(
            out,
            "task {}: topology {}, {} calls, cost {:.2} of {}, oob {}, {}",
            t.id,
            trace.topology,
            trace.calls.len(),
            trace.cumulative_cost,
            budget,
            trace.oob,
            success
        );
        if let Some(a) = &trace.final_answer {
            let _ = writeln!(out, "  answer: {}", a.lines().last().unwrap_or("").trim());
        }
        traces.push(trace);
    }

    if task.is_some() || task_id.is_some() {
        write_file(&ctx.out(TRACE_FILE), &pretty(&traces[0]))?;
    } else {
        let mut lines = String::new();
        for tr in &traces {
            lines.push_str(&serde_json::to_string(tr).expect("trace serializes"));
            lines.push('\n');
        }
        write_file(&ctx.out(TRACES_FILE), &lines)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub avg_cost: f64,
    pub oob: usize,
    pub topology_counts: [usize; 4],
}

pub fn summarize(traces: &[RunTrace]) -> Summary {
    let runs = traces.len();
    let correct = traces.iter().filter(|t| t.succeeded()).count();
    let mut topology_counts = [0; 4];
    for t in traces {
        topology_counts[t.topology.index()] += 1;
    }
    let (accuracy_pct, avg_cost) = if runs == 0 {
        (0.0, 0.0)
    } else {
        (
            100.0 * correct as f64 / runs as f64,
            traces.iter().map(|t| t.cumulative_cost).sum::<f64>() / runs as f64,
        )
    };
    Summary { runs, correct, accuracy_pct, avg_cost, oob: crate::topology::count_oob(traces), topology_counts }
}

/// Reads traces written one per line, or a single pretty-printed trace.
pub fn load_traces(text: &str) -> Result<Vec<RunTrace>, String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if let Ok(single) = serde_json::from_str::<RunTrace>(trimmed) {
        return Ok(vec![single]);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

fn cmd_report(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    let traces = load_traces(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    if traces.is_empty() {
        let _ = writeln!(err, "warning: {} contains no traces", path.display());
    }
    let s = summarize(&traces);
    let _ = writeln!(out, "Runs      {}", s.runs);
    let _ = writeln!(out, "Acc       {:.1}%", s.accuracy_pct);
    let _ = writeln!(out, "Avg Cost  {:.1}", s.avg_cost);
    let _ = writeln!(out, "OOB       {}/{}", s.oob, s.runs);
    let _ = writeln!(out, "Topology distribution:");
    for t in Topology::ALL {
        let n = s.topology_counts[t.index()];
        let pct = if s.runs == 0 { 0.0 } else { 100.0 * n as f64 / s.runs as f64 };
        let _ = writeln!(out, "  {:<15} {:>5} ({:.1}%)", t.name(), n, pct);
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if let Command::Report { traces } = &cli.command {
        let path = match traces {
            Some(p) => p.clone(),
            None => Context::load(cli)?.out(TRACES_FILE),
        };
        return cmd_report(&path, out, err);
    }
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Provision { explain } => cmd_provision(&ctx, *explain, out),
        Command::Collect => cmd_collect(&ctx, out),
        Command::Train => cmd_train(&ctx, out),
        Command::Run { task, task_id, topology, weights } => {
            cmd_run(&ctx, task.as_deref(), task_id.as_deref(), topology.as_deref(), weights.as_deref(), out)
        }
        Command::Report { .. } => unreachable!(),
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_ERROR
                }
            };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{CallRecord, Role};

    fn trace(topology: Topology, success: bool, cost: f64, budget: f64) -> RunTrace {
        RunTrace {
            task_id: "t".into(),
            topology,
            budget,
            calls: vec![CallRecord {
                instance: 0,
                model: "m".into(),
                role: Role::Executor,
                step: 1,
                prompt_tokens: 1,
                completion_tokens: 1,
                unit_cost: cost,
                cost_before: 0.0,
            }],
            cumulative_cost: cost,
            final_answer: Some("x".into()),
            success: Some(success),
            oob: cost > budget,
            terminated_early: cost > budget,
            precheck_stopped: false,
            failure: None,
            evaluation_note: None,
        }
    }

    #[test]
    fn summary_arithmetic() {
        let traces = vec![
            trace(Topology::Linear, true, 100.0, 500.0),
            trace(Topology::Feedback, true, 200.0, 500.0),
            trace(Topology::Feedback, true, 300.0, 500.0),
            trace(Topology::Star, false, 400.0, 350.0),
        ];
        let s = summarize(&traces);
        assert_eq!(s.accuracy_pct, 75.0);
        assert_eq!(s.avg_cost, 250.0);
        assert_eq!(s.oob, 1);
        assert_eq!(s.topology_counts, [1, 1, 2, 0]);
        assert_eq!(summarize(&[]).avg_cost, 0.0);
    }

    #[test]
    fn trace_file_formats() {
        let t = trace(Topology::Linear, true, 1.0, 2.0);
        let single = serde_json::to_string_pretty(&t).unwrap();
        assert_eq!(load_traces(&single).unwrap(), vec![t.clone()]);
        let lines = format!("{}\n{}\n", serde_json::to_string(&t).unwrap(), serde_json::to_string(&t).unwrap());
        assert_eq!(load_traces(&lines).unwrap().len(), 2);
        assert!(load_traces("").unwrap().is_empty());
        assert!(load_traces("{}\n{}\n").unwrap_err().starts_with("line 1"));
    }

    #[test]
    fn masked_choice() {
        let pool = Pool { instances: vec![] };
        assert_eq!(choose_topology(&[0.1, 0.2, 0.3, 0.4], &pool), None);
        let m = crate::catalog::ModelSpec {
            name: "m".into(),
            tier: 1,
            price_in_per_mtok: 0.0,
            price_out_per_mtok: 0.0,
            backend_id: "x".into(),
        };
        let two = Pool { instances: vec![m.clone(), m] };
        assert_eq!(choose_topology(&[0.1, 0.2, 0.3, 0.4], &two), Some(Topology::Feedback));
        assert_eq!(choose_topology(&[0.25; 4], &two), Some(Topology::Linear));
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["agentbudget", "bogus"], &mut o, &mut e), EXIT_ERROR);
        assert_eq!(run(["agentbudget", "provision"], &mut o, &mut e), EXIT_ERROR);
        assert!(String::from_utf8_lossy(&e).contains("--config is required"));
        assert_eq!(run(["agentbudget", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
