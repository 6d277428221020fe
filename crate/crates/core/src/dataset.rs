//! Offline experience dataset: every topology executed on every `(task, budget)`.
//!
//! Stored as JSON lines. The first line is a header, then one experience per
//! line. Rewards are not stored; they are recomputed from outcomes at
//! training time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendRegistry;
use crate::catalog::ModelCatalog;
use crate::provision::{solve, ProvisionProblem, ProvisionSolution};
use crate::topology::{assign_roles, execute, Evaluator, ExecConfig, FailureKind, Pool, TaskSpec, Topology};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate experience for task `{task_id}`, budget {budget}, topology {topology}")]
    Duplicate { task_id: String, budget: f64, topology: usize },
    #[error("invalid experience for task `{task_id}`: {message}")]
    Invalid { task_id: String, message: String },
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("provisioning failed for budget {budget}: {message}")]
    Provision { budget: f64, message: String },
    #[error("configuration error while running task `{task_id}` with {topology}: {message}")]
    Config { task_id: String, topology: Topology, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub catalog_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collected_at: Option<String>,
}

impl DatasetHeader {
    pub fn new(catalog_hash: impl Into<String>, seed: u64) -> Self {
        Self { version: DATASET_VERSION, catalog_hash: catalog_hash.into(), seed, collected_at: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub task_id: String,
    pub task_text: String,
    pub budget: f64,
    pub topology: usize,
    pub success: bool,
    pub actual_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Experience {
    fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |message: String| DatasetError::Invalid { task_id: self.task_id.clone(), message };
        if self.topology >= Topology::ALL.len() {
            return Err(invalid(format!("topology index {} out of range", self.topology)));
        }
        if !(self.budget.is_finite() && self.budget > 0.0) {
            return Err(invalid(format!("budget {} must be > 0", self.budget)));
        }
        if !(self.actual_cost.is_finite() && self.actual_cost >= 0.0) {
            return Err(invalid(format!("actual cost {} must be >= 0", self.actual_cost)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceDataset {
    pub header: DatasetHeader,
    pub experiences: Vec<Experience>,
}

impl ExperienceDataset {
    pub fn new(header: DatasetHeader, experiences: Vec<Experience>) -> Result<Self, DatasetError> {
        let d = Self { header, experiences };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.header.version != DATASET_VERSION {
            return Err(DatasetError::Version(self.header.version));
        }
        let mut seen = BTreeSet::new();
        for e in &self.experiences {
            e.validate()?;
            if !seen.insert((e.task_id.as_str(), e.budget.to_bits(), e.topology)) {
                return Err(DatasetError::Duplicate {
                    task_id: e.task_id.clone(),
                    budget: e.budget,
                    topology: e.topology,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Experiences per `(task_id, budget)`, indexed by topology.
    pub fn groups(&self) -> BTreeMap<(String, u64), [Option<&Experience>; 4]> {
        let mut out: BTreeMap<(String, u64), [Option<&Experience>; 4]> = BTreeMap::new();
        for e in &self.experiences {
            out.entry((e.task_id.clone(), e.budget.to_bits())).or_default()[e.topology] = Some(e);
        }
        out
    }

    /// Groups missing at least one topology, with the missing indices.
    pub fn incomplete_groups(&self) -> Vec<(String, f64, Vec<usize>)> {
        self.groups()
            .into_iter()
            .filter_map(|((task, bits), slots)| {
                let missing: Vec<usize> = (0..4).filter(|&i| slots[i].is_none()).collect();
                (!missing.is_empty()).then(|| (task, f64::from_bits(bits), missing))
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for e in &self.experiences {
            s.push_str(&serde_json::to_string(e).expect("experience serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(DatasetError::Malformed { line: 1, message: "missing header".into() })?;
        let header: DatasetHeader =
            serde_json::from_str(first).map_err(|e| DatasetError::Malformed { line: 1, message: e.to_string() })?;
        let mut experiences = Vec::new();
        for (i, line) in lines {
            let e: Experience = serde_json::from_str(line)
                .map_err(|err| DatasetError::Malformed { line: i + 1, message: err.to_string() })?;
            experiences.push(e);
        }
        Self::new(header, experiences)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl())
            .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_jsonl(&text)
    }
}

/// What collection needs besides the tasks and budgets.
pub struct CollectSetup<'a> {
    pub catalog: &'a ModelCatalog,
    pub registry: &'a BackendRegistry,
    pub evaluator: &'a dyn Evaluator,
    pub exec: &'a ExecConfig,
    pub t_in: u64,
    pub t_out: u64,
    pub instance_cap: u32,
    pub min_agents: u32,
    pub seed: u64,
    /// Worker threads across tasks; 1 runs inline.
    pub jobs: usize,
}

impl CollectSetup<'_> {
    pub fn provision(&self, budget: f64) -> Result<ProvisionSolution, DatasetError> {
        let problem = ProvisionProblem::new(budget, self.catalog.tier_costs(self.t_in, self.t_out))
            .with_cap(self.instance_cap)
            .with_min_agents(self.min_agents);
        let sol = solve(&problem).map_err(|e| DatasetError::Provision { budget, message: e.to_string() })?;
        if !sol.feasible {
            return Err(DatasetError::Provision {
                budget,
                message: sol.reason.unwrap_or_else(|| "infeasible".into()),
            });
        }
        Ok(sol)
    }
}

fn run_task(task: &TaskSpec, budget: f64, pool: &Pool, setup: &CollectSetup<'_>) -> Result<Vec<Experience>, DatasetError> {
    let exec = ExecConfig { run_seed: setup.seed, ..setup.exec.clone() };
    let mut out = Vec::with_capacity(4);
    for topology in Topology::ALL {
        let base = Experience {
            task_id: task.id.clone(),
            task_text: task.text.clone(),
            budget,
            topology: topology.index(),
            success: false,
            actual_cost: 0.0,
            error: None,
        };
        let exp = match assign_roles(pool, topology) {
            Err(e) => Experience { error: Some(e.to_string()), ..base },
            Ok(assignment) => {
                let trace = execute(task, &assignment, budget, setup.registry, setup.evaluator, &exec);
                if let Some(f) = &trace.failure {
                    if f.kind == FailureKind::Config {
                        return Err(DatasetError::Config {
                            task_id: task.id.clone(),
                            topology,
                            message: f.message.clone(),
                        });
                    }
                }
                Experience {
                    success: trace.succeeded(),
                    actual_cost: trace.cumulative_cost,
                    error: trace.failure.map(|f| f.message),
                    ..base
                }
            }
        };
        out.push(exp);
    }
    Ok(out)
}

/// Runs all four topologies for every task at every budget.
pub fn collect(tasks: &[TaskSpec], budgets: &[f64], setup: &CollectSetup<'_>) -> Result<ExperienceDataset, DatasetError> {
    let mut experiences = Vec::with_capacity(tasks.len() * budgets.len() * 4);
    for &budget in budgets {
        if tasks.is_empty() {
            continue;
        }
        let pool = Pool::from_solution(&setup.provision(budget)?, setup.catalog)
            .map_err(|e| DatasetError::Provision { budget, message: e.to_string() })?;
        let per_task: Vec<Result<Vec<Experience>, DatasetError>> = if setup.jobs > 1 {
            let threads = rayon::ThreadPoolBuilder::new()
                .num_threads(setup.jobs)
                .build()
                .map_err(|e| DatasetError::Io { path: "<thread pool>".into(), message: e.to_string() })?;
            threads.install(|| tasks.par_iter().map(|t| run_task(t, budget, &pool, setup)).collect())
        } else {
            tasks.iter().map(|t| run_task(t, budget, &pool, setup)).collect()
        };
        for r in per_task {
            experiences.extend(r?);
        }
    }
    ExperienceDataset::new(DatasetHeader::new(setup.catalog.content_hash(), setup.seed), experiences)
}
