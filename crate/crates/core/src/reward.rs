//! Trajectory-final reward combining task success with cost efficiency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("budget must be finite and > 0, got {0}")]
    InvalidBudget(f64),
    #[error("actual cost must be finite and >= 0, got {0}")]
    InvalidCost(f64),
    #[error("reward constant `{0}` is not finite or out of range")]
    InvalidConstant(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub w_perf: f64,
    pub w_cost: f64,
    pub c_succ: f64,
    pub c_fail: f64,
    pub c_overflow: f64,
    /// Slope of the linear savings bonus `g(x) = slope * x`.
    pub bonus_slope: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_perf: 1.0, w_cost: 1.0, c_succ: 1.0, c_fail: 1.0, c_overflow: 2.0, bonus_slope: 0.5 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let non_negative = [("w_perf", self.w_perf), ("w_cost", self.w_cost), ("bonus_slope", self.bonus_slope)];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::InvalidConstant(name));
            }
        }
        let positive = [("c_succ", self.c_succ), ("c_fail", self.c_fail), ("c_overflow", self.c_overflow)];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(RewardError::InvalidConstant(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub actual_cost: f64,
    pub budget: f64,
}

/// Success term and cost term before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParts {
    pub perf: f64,
    pub cost: f64,
}

pub fn reward_parts(outcome: &Outcome, config: &RewardConfig) -> Result<RewardParts, RewardError> {
    if !outcome.budget.is_finite() || outcome.budget <= 0.0 {
        return Err(RewardError::InvalidBudget(outcome.budget));
    }
    if !outcome.actual_cost.is_finite() || outcome.actual_cost < 0.0 {
        return Err(RewardError::InvalidCost(outcome.actual_cost));
    }
    config.validate()?;

    let perf = if outcome.success { config.c_succ } else { -config.c_fail };
    let cost = if outcome.actual_cost > outcome.budget {
        -config.c_overflow
    } else if outcome.success {
        // saved fraction written as (B - C) / B: exact when C is a round fraction of B
        config.bonus_slope * ((outcome.budget - outcome.actual_cost) / outcome.budget)
    } else {
        0.0
    };
    Ok(RewardParts { perf, cost })
}

pub fn compute_reward(outcome: &Outcome, config: &RewardConfig) -> Result<f64, RewardError> {
    let parts = reward_parts(outcome, config)?;
    Ok(config.w_perf * parts.perf + config.w_cost * parts.cost)
}
