//! Budget-constrained pool provisioning.
//!
//! Each tier gets an integer decision weight built bottom-up so that one
//! instance of a tier outweighs every budget-feasible bundle of lower tiers:
//!
//! ```text
//! W_L = 1
//! W_i = 1 + sum_{j > i} W_j * floor(B / c_j)
//! ```
//!
//! Maximizing `sum W_i * n_i` under `sum c_i * n_i <= B` and a minimum agent
//! count then yields the lexicographically best pool. The weights grow
//! multiplicatively, so they are kept as [`BigUint`].
//!
//! [`solve`] is an exact branch-and-bound over tiers (strongest first) with a
//! fractional-relaxation bound. [`brute_force_solve`] enumerates every count
//! vector and exists to cross-check it.

use std::cmp::Ordering;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_INSTANCE_CAP: u32 = 5;
pub const DEFAULT_MIN_AGENTS: u32 = 2;

/// Limits for the exhaustive oracle.
pub const BRUTE_FORCE_MAX_TIERS: usize = 6;
pub const BRUTE_FORCE_MAX_COUNT: u64 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum ProvisionError {
    #[error("budget must be finite and > 0, got {0}")]
    InvalidBudget(f64),
    #[error("at least one tier is required")]
    NoTiers,
    #[error("tier {tier} cost must be finite and > 0, got {value}")]
    InvalidCost { tier: usize, value: f64 },
    #[error("instance cap must be >= 1")]
    ZeroCap,
    #[error("instance too large for brute force: {0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionProblem {
    pub budget: f64,
    /// Per-call cost of one instance of each tier, strongest tier first.
    pub tier_costs: Vec<f64>,
    #[serde(default = "default_cap")]
    pub instance_cap: u32,
    #[serde(default = "default_min_agents")]
    pub min_agents: u32,
}

fn default_cap() -> u32 {
    DEFAULT_INSTANCE_CAP
}

fn default_min_agents() -> u32 {
    DEFAULT_MIN_AGENTS
}

impl ProvisionProblem {
    pub fn new(budget: f64, tier_costs: Vec<f64>) -> Self {
        Self {
            budget,
            tier_costs,
            instance_cap: DEFAULT_INSTANCE_CAP,
            min_agents: DEFAULT_MIN_AGENTS,
        }
    }

    pub fn with_cap(mut self, cap: u32) -> Self {
        self.instance_cap = cap;
        self
    }

    pub fn with_min_agents(mut self, min_agents: u32) -> Self {
        self.min_agents = min_agents;
        self
    }

    pub fn validate(&self) -> Result<(), ProvisionError> {
        if !self.budget.is_finite() || self.budget <= 0.0 {
            return Err(ProvisionError::InvalidBudget(self.budget));
        }
        if self.tier_costs.is_empty() {
            return Err(ProvisionError::NoTiers);
        }
        for (i, &c) in self.tier_costs.iter().enumerate() {
            if !c.is_finite() || c <= 0.0 {
                return Err(ProvisionError::InvalidCost { tier: i + 1, value: c });
            }
        }
        if self.instance_cap == 0 {
            return Err(ProvisionError::ZeroCap);
        }
        Ok(())
    }

    pub fn num_tiers(&self) -> usize {
        self.tier_costs.len()
    }
}

/// Largest `k` with `base + k * cost <= budget` under floating-point evaluation.
///
/// Uses the same expression the feasibility check uses, so counts it admits are
/// never rejected later by rounding.
fn max_affordable(base: f64, cost: f64, budget: f64) -> u64 {
    if base > budget {
        return 0;
    }
    let mut k = ((budget - base) / cost).floor().max(0.0) as u64;
    while k > 0 && base + k as f64 * cost > budget {
        k -= 1;
    }
    while base + (k + 1) as f64 * cost <= budget {
        k += 1;
    }
    k
}

/// `floor(B / c)` consistent with the bundle cost check.
pub fn affordable_count(budget: f64, cost: f64) -> u64 {
    max_affordable(0.0, cost, budget)
}

/// Canonical cost of a count vector: a left fold in tier order.
pub fn bundle_cost(tier_costs: &[f64], counts: &[u32]) -> f64 {
    tier_costs
        .iter()
        .zip(counts)
        .fold(0.0, |acc, (&c, &n)| acc + n as f64 * c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionWeights {
    #[serde(with = "biguint_vec_str")]
    pub weights: Vec<BigUint>,
}

impl DecisionWeights {
    pub fn total(&self, counts: &[u32]) -> BigUint {
        self.weights
            .iter()
            .zip(counts)
            .map(|(w, &n)| w * BigUint::from(n))
            .sum()
    }
}

pub fn compute_weights(problem: &ProvisionProblem) -> Result<DecisionWeights, ProvisionError> {
    problem.validate()?;
    let l = problem.num_tiers();
    let mut weights = vec![BigUint::from(1u32); l];
    // running sum of W_j * floor(B / c_j) over the tiers below i
    let mut lower = BigUint::zero();
    for i in (0..l).rev() {
        weights[i] = BigUint::from(1u32) + &lower;
        lower += &weights[i] * BigUint::from(affordable_count(problem.budget, problem.tier_costs[i]));
    }
    Ok(DecisionWeights { weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionSolution {
    /// Instances per tier, strongest tier first.
    pub counts: Vec<u32>,
    #[serde(with = "biguint_str")]
    pub total_weight: BigUint,
    pub total_cost: f64,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ProvisionSolution {
    pub fn total_instances(&self) -> u32 {
        self.counts.iter().sum()
    }

    fn infeasible(problem: &ProvisionProblem) -> Self {
        let cheapest = problem
            .tier_costs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let reason = format!(
            "no pool of at least {} instances fits budget {} (cheapest instance costs {}, cap {} per tier)",
            problem.min_agents, problem.budget, cheapest, problem.instance_cap
        );
        Self {
            counts: vec![0; problem.num_tiers()],
            total_weight: BigUint::zero(),
            total_cost: 0.0,
            feasible: false,
            reason: Some(reason),
        }
    }
}

/// Candidate ordering: higher weight, then lower cost, then the
/// lexicographically smaller count vector.
fn better(a: (&BigUint, f64, &[u32]), b: (&BigUint, f64, &[u32])) -> bool {
    match a.0.cmp(b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a.2 < b.2,
        },
    }
}

struct Incumbent {
    weight: BigUint,
    cost: f64,
    counts: Vec<u32>,
}

struct Search<'a> {
    problem: &'a ProvisionProblem,
    weights: &'a [BigUint],
    /// Tiers sorted by weight-per-cost, best first, for the relaxation bound.
    ratio_order: Vec<usize>,
    costs_q: Vec<BigRational>,
    weights_q: Vec<BigRational>,
    counts: Vec<u32>,
    best: Option<Incumbent>,
    nodes: u64,
}

impl<'a> Search<'a> {
    fn new(problem: &'a ProvisionProblem, weights: &'a [BigUint]) -> Self {
        let costs_q: Vec<BigRational> = problem
            .tier_costs
            .iter()
            .map(|&c| BigRational::from_float(c).expect("validated finite"))
            .collect();
        let weights_q: Vec<BigRational> = weights
            .iter()
            .map(|w| BigRational::from_integer(BigInt::from(w.clone())))
            .collect();
        let mut ratio_order: Vec<usize> = (0..problem.num_tiers()).collect();
        ratio_order.sort_by(|&a, &b| {
            // W_a / c_a vs W_b / c_b, descending
            let lhs = &weights_q[a] * &costs_q[b];
            let rhs = &weights_q[b] * &costs_q[a];
            rhs.cmp(&lhs).then(a.cmp(&b))
        });
        Self {
            problem,
            weights,
            ratio_order,
            costs_q,
            weights_q,
            counts: vec![0; problem.num_tiers()],
            best: None,
            nodes: 0,
        }
    }

    /// Fractional-knapsack bound on the weight tiers `from..` can still add.
    fn relaxation_bound(&self, from: usize, residual: f64) -> BigRational {
        // pad the residual so rounding in the float feasibility test can never
        // admit a completion the bound did not account for
        let padded = residual * (1.0 + 1e-9) + 1e-9;
        let mut left = BigRational::from_float(padded.max(0.0)).expect("finite");
        let cap = BigRational::from_integer(BigInt::from(self.problem.instance_cap));
        let mut bound = BigRational::zero();
        for &t in self.ratio_order.iter().filter(|&&t| t >= from) {
            if left.is_zero() {
                break;
            }
            let fits = &left / &self.costs_q[t];
            let take = if fits < cap { fits } else { cap.clone() };
            left -= &take * &self.costs_q[t];
            bound += &take * &self.weights_q[t];
        }
        bound
    }

    fn max_more_agents(&self, from: usize, residual: f64) -> u64 {
        self.problem.tier_costs[from..]
            .iter()
            .map(|&c| {
                let padded = residual * (1.0 + 1e-9) + 1e-9;
                ((padded / c).floor().max(0.0) as u64).min(self.problem.instance_cap as u64)
            })
            .sum()
    }

    fn run(&mut self, depth: usize, cost: f64, weight: BigUint, agents: u64) {
        self.nodes += 1;
        let p = self.problem;
        if depth == p.num_tiers() {
            if agents < p.min_agents as u64 {
                return;
            }
            let take = match &self.best {
                None => true,
                Some(b) => better((&weight, cost, &self.counts), (&b.weight, b.cost, &b.counts)),
            };
            if take {
                self.best = Some(Incumbent { weight, cost, counts: self.counts.clone() });
            }
            return;
        }
        let residual = p.budget - cost;
        if agents + self.max_more_agents(depth, residual) < p.min_agents as u64 {
            return;
        }
        if let Some(best) = &self.best {
            let bound = BigRational::from_integer(BigInt::from(weight.clone()))
                + self.relaxation_bound(depth, residual);
            let best_q = BigRational::from_integer(BigInt::from(best.weight.clone()));
            if bound < best_q {
                return;
            }
        }
        let c = p.tier_costs[depth];
        let max_k = max_affordable(cost, c, p.budget).min(p.instance_cap as u64);
        for k in (0..=max_k).rev() {
            self.counts[depth] = k as u32;
            let next_cost = cost + k as f64 * c;
            let next_weight = &weight + &self.weights[depth] * BigUint::from(k);
            self.run(depth + 1, next_cost, next_weight, agents + k);
        }
        self.counts[depth] = 0;
    }
}

/// Exact optimum of the tier-weighted provisioning program.
pub fn solve(problem: &ProvisionProblem) -> Result<ProvisionSolution, ProvisionError> {
    Ok(solve_with_stats(problem)?.0)
}

/// Like [`solve`], also returning the number of search nodes visited.
pub fn solve_with_stats(problem: &ProvisionProblem) -> Result<(ProvisionSolution, u64), ProvisionError> {
    let weights = compute_weights(problem)?;
    let mut search = Search::new(problem, &weights.weights);
    search.run(0, 0.0, BigUint::zero(), 0);
    let nodes = search.nodes;
    let solution = match search.best {
        Some(b) => ProvisionSolution {
            counts: b.counts,
            total_weight: b.weight,
            total_cost: b.cost,
            feasible: true,
            reason: None,
        },
        None => ProvisionSolution::infeasible(problem),
    };
    Ok((solution, nodes))
}

/// Exhaustive enumeration of every count vector; test oracle for [`solve`].
pub fn brute_force_solve(problem: &ProvisionProblem) -> Result<ProvisionSolution, ProvisionError> {
    let weights = compute_weights(problem)?;
    let l = problem.num_tiers();
    if l > BRUTE_FORCE_MAX_TIERS {
        return Err(ProvisionError::TooLarge(format!("{l} tiers > {BRUTE_FORCE_MAX_TIERS}")));
    }
    let limits: Vec<u32> = problem
        .tier_costs
        .iter()
        .map(|&c| affordable_count(problem.budget, c).min(problem.instance_cap as u64))
        .map(|m| m as u32)
        .collect();
    if let Some((i, m)) = limits.iter().enumerate().find(|(_, &m)| m as u64 > BRUTE_FORCE_MAX_COUNT) {
        return Err(ProvisionError::TooLarge(format!(
            "tier {} admits {m} instances > {BRUTE_FORCE_MAX_COUNT}",
            i + 1
        )));
    }

    let mut best: Option<(BigUint, f64, Vec<u32>)> = None;
    let mut counts = vec![0u32; l];
    loop {
        let cost = bundle_cost(&problem.tier_costs, &counts);
        let agents: u32 = counts.iter().sum();
        if cost <= problem.budget && agents >= problem.min_agents {
            let w = weights.total(&counts);
            let take = match &best {
                None => true,
                Some((bw, bc, bn)) => better((&w, cost, &counts), (bw, *bc, bn)),
            };
            if take {
                best = Some((w, cost, counts.clone()));
            }
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == l {
                return Ok(match best {
                    Some((w, c, n)) => ProvisionSolution {
                        counts: n,
                        total_weight: w,
                        total_cost: c,
                        feasible: true,
                        reason: None,
                    },
                    None => ProvisionSolution::infeasible(problem),
                });
            }
            if counts[pos] < limits[pos] {
                counts[pos] += 1;
                break;
            }
            counts[pos] = 0;
            pos += 1;
        }
    }
}

/// Weight as `u128` when it fits; convenient for reporting.
pub fn weight_as_u128(w: &BigUint) -> Option<u128> {
    w.to_u128()
}

mod biguint_str {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| serde::de::Error::custom("invalid integer"))
    }
}

mod biguint_vec_str {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigUint], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|w| w.to_str_radix(10)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigUint>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| {
                BigUint::parse_bytes(s.as_bytes(), 10)
                    .ok_or_else(|| serde::de::Error::custom("invalid integer"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn ws(problem: &ProvisionProblem) -> Vec<u64> {
        compute_weights(problem)
            .unwrap()
            .weights
            .iter()
            .map(|w| w.to_u64().unwrap())
            .collect()
    }

    #[test]
    fn single_tier_weight() {
        assert_eq!(ws(&ProvisionProblem::new(1000.0, vec![250.0])), vec![1]);
    }

    #[test]
    fn two_tier_weights() {
        assert_eq!(ws(&ProvisionProblem::new(2000.0, vec![1235.0, 250.0])), vec![9, 1]);
    }

    #[test]
    fn three_tier_weights() {
        assert_eq!(ws(&ProvisionProblem::new(1000.0, vec![500.0, 200.0, 100.0])), vec![66, 11, 1]);
    }

    #[test]
    fn weights_strictly_decrease() {
        let w = compute_weights(&ProvisionProblem::new(7777.0, vec![3000.0, 900.0, 120.0, 11.0]))
            .unwrap()
            .weights;
        assert!(w.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(w.last().unwrap(), &big(1));
    }

    #[test]
    fn weights_do_not_overflow() {
        // floor(B/c) = 10^6 on nine lower tiers: far past u64
        let p = ProvisionProblem::new(1e6, vec![1.0; 10]);
        let w = compute_weights(&p).unwrap().weights;
        assert!(w[0] > BigUint::from(u64::MAX));
    }

    #[test]
    fn solve_budget_2000() {
        let p = ProvisionProblem::new(2000.0, vec![1235.0, 250.0]);
        let s = solve(&p).unwrap();
        assert!(s.feasible);
        assert_eq!(s.counts, vec![1, 3]);
        assert_eq!(s.total_cost, 1985.0);
        assert_eq!(s.total_weight, big(12));
        assert_eq!(brute_force_solve(&p).unwrap(), s);
    }

    #[test]
    fn solve_budget_500() {
        let p = ProvisionProblem::new(500.0, vec![1235.0, 250.0]);
        let s = solve(&p).unwrap();
        assert_eq!(s.counts, vec![0, 2]);
        assert_eq!(s.total_cost, 500.0);
        assert_eq!(s.total_weight, big(2));
        assert_eq!(brute_force_solve(&p).unwrap(), s);
    }

    #[test]
    fn solve_infeasible() {
        let p = ProvisionProblem::new(300.0, vec![1235.0, 250.0]);
        let s = solve(&p).unwrap();
        assert!(!s.feasible);
        assert!(s.reason.as_deref().unwrap().contains("at least 2"));
        assert_eq!(brute_force_solve(&p).unwrap(), s);
    }

    #[test]
    fn single_tier_hits_cap() {
        let p = ProvisionProblem::new(10.0 * 37.5, vec![37.5]);
        let s = brute_force_solve(&p).unwrap();
        assert_eq!(s.counts, vec![5]);
        assert_eq!(solve(&p).unwrap(), s);
    }

    #[test]
    fn exactly_two_affordable() {
        // only two of the cheapest tier fit; anything with a stronger tier is over budget
        let p = ProvisionProblem::new(220.0, vec![400.0, 150.0, 100.0]);
        let s = brute_force_solve(&p).unwrap();
        assert_eq!(s.counts, vec![0, 0, 2]);
        assert_eq!(solve(&p).unwrap(), s);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let p = ProvisionProblem::new(1000.0, vec![1.0; 7]);
        assert!(matches!(brute_force_solve(&p), Err(ProvisionError::TooLarge(_))));
        let p = ProvisionProblem::new(1000.0, vec![1.0]).with_cap(50);
        assert!(matches!(brute_force_solve(&p), Err(ProvisionError::TooLarge(_))));
    }

    #[test]
    fn rejects_bad_problems() {
        assert_eq!(
            solve(&ProvisionProblem::new(0.0, vec![1.0])).unwrap_err(),
            ProvisionError::InvalidBudget(0.0)
        );
        assert_eq!(solve(&ProvisionProblem::new(1.0, vec![])).unwrap_err(), ProvisionError::NoTiers);
        assert!(matches!(
            solve(&ProvisionProblem::new(1.0, vec![1.0, -2.0])).unwrap_err(),
            ProvisionError::InvalidCost { tier: 2, .. }
        ));
    }

    #[test]
    fn solution_json_round_trip() {
        let s = solve(&ProvisionProblem::new(2000.0, vec![1235.0, 250.0])).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"total_weight\":\"12\""));
        let back: ProvisionSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn affordable_count_respects_float_check() {
        for &(b, c) in &[(0.3, 0.1), (1000.0, 200.0), (2000.0, 1235.0), (1.0, 3.0)] {
            let k = affordable_count(b, c);
            assert!(k as f64 * c <= b);
            assert!((k + 1) as f64 * c > b);
        }
    }

    /// Max of `sum W_j m_j` over tiers after `i` with `sum m_j c_j <= budget`,
    /// unbounded multiplicities. Integer costs; unbounded-knapsack table.
    fn max_lower_bundle(weights: &[u128], costs: &[u64], budget: u64, i: usize) -> u128 {
        let mut best = vec![0u128; budget as usize + 1];
        for b in 1..=budget as usize {
            let mut v = best[b - 1];
            for j in i + 1..costs.len() {
                let c = costs[j] as usize;
                if c <= b {
                    v = v.max(best[b - c] + weights[j]);
                }
            }
            best[b] = v;
        }
        best[budget as usize]
    }

    /// Lexicographically largest feasible count vector by enumeration.
    fn lex_max_feasible(p: &ProvisionProblem) -> Option<Vec<u32>> {
        let limits: Vec<u32> = p
            .tier_costs
            .iter()
            .map(|&c| affordable_count(p.budget, c).min(p.instance_cap as u64) as u32)
            .collect();
        let mut out: Option<Vec<u32>> = None;
        let mut counts = vec![0u32; limits.len()];
        loop {
            if bundle_cost(&p.tier_costs, &counts) <= p.budget
                && counts.iter().sum::<u32>() >= p.min_agents
                && out.as_ref().is_none_or(|o| counts > *o)
            {
                out = Some(counts.clone());
            }
            let mut pos = 0;
            loop {
                if pos == counts.len() {
                    return out;
                }
                if counts[pos] < limits[pos] {
                    counts[pos] += 1;
                    break;
                }
                counts[pos] = 0;
                pos += 1;
            }
        }
    }

    fn small_problem() -> impl Strategy<Value = ProvisionProblem> {
        (1usize..=5)
            .prop_flat_map(|l| {
                (
                    proptest::collection::vec(1000u32..=200_000, l),
                    100u32..=10_000,
                    1u32..=5,
                    1u32..=3,
                )
            })
            .prop_map(|(costs, budget, cap, min_agents)| {
                let costs = costs.into_iter().map(|c| c as f64 / 100.0).collect();
                ProvisionProblem::new(budget as f64, costs)
                    .with_cap(cap)
                    .with_min_agents(min_agents)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn solve_matches_brute_force(p in small_problem()) {
            let fast = solve(&p).unwrap();
            let slow = brute_force_solve(&p).unwrap();
            prop_assert_eq!(&fast, &slow);
            if fast.feasible {
                prop_assert!(fast.total_cost <= p.budget);
                prop_assert!(fast.total_instances() >= p.min_agents);
                prop_assert!(fast.counts.iter().all(|&n| n <= p.instance_cap));
                prop_assert_eq!(fast.total_cost, bundle_cost(&p.tier_costs, &fast.counts));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn one_unit_outweighs_any_lower_bundle(
            costs in proptest::collection::vec(10u64..=2000, 1..=5),
            budget in 100u64..=10_000,
        ) {
            let p = ProvisionProblem::new(budget as f64, costs.iter().map(|&c| c as f64).collect());
            let w: Vec<u128> = compute_weights(&p).unwrap().weights.iter().map(|w| w.to_u128().unwrap()).collect();
            for i in 0..costs.len() {
                let lower = max_lower_bundle(&w, &costs, budget, i);
                prop_assert!(w[i] > lower, "tier {} weight {} <= lower bundle {}", i + 1, w[i], lower);
            }
        }

        #[test]
        fn lexicographic_when_caps_slack(
            costs in proptest::collection::vec(100u32..=2000, 1..=4),
            budget in 200u32..=4000,
            min_agents in 1u32..=2,
        ) {
            let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
            let cap = costs.iter().map(|&c| affordable_count(budget as f64, c)).max().unwrap().max(1) as u32;
            let p = ProvisionProblem::new(budget as f64, costs).with_cap(cap).with_min_agents(min_agents);
            let s = solve(&p).unwrap();
            match lex_max_feasible(&p) {
                Some(v) => prop_assert_eq!(s.counts, v),
                None => prop_assert!(!s.feasible),
            }
        }
    }
}
