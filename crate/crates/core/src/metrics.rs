//! Utility accounting, the task-execution estimates and a randomized
//! unilateral-deviation tester that works with any mechanism runner.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Agent, AgentId, MarginalValuation, MarketInstance, Outcome, Side};
use crate::money::{money_cmp, Money};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MetricsError {
    #[error("task count {0} outside the domain (must exceed 1)")]
    DomainError(u64),
}

/// Expected number of a requester's `lambda` tasks that get executed when
/// each runs independently with probability `1/log10(lambda)`. Capped at
/// `lambda`.
pub fn expected_tasks(lambda: u64) -> Result<f64, MetricsError> {
    if lambda <= 1 {
        return Err(MetricsError::DomainError(lambda));
    }
    let l = lambda as f64;
    Ok((l / l.log10()).min(l))
}

/// Markov bound on executing at least `0.9 · lambda` of the tasks.
pub fn tail_bound(lambda: u64) -> Result<f64, MetricsError> {
    if lambda <= 1 {
        return Err(MetricsError::DomainError(lambda));
    }
    Ok((10.0 / (9.0 * (lambda as f64).log10())).min(1.0))
}

/// Per-task execution probability `min(1, 1/log10(lambda))`; 1 for a
/// single task.
pub fn execution_probability(lambda: u64) -> f64 {
    if lambda <= 1 {
        return 1.0;
    }
    (1.0 / (lambda as f64).log10()).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct RunMetrics<M> {
    /// Utility under the true valuation, net of fees.
    pub agent_utilities: BTreeMap<AgentId, M>,
    pub platform_utility: M,
    /// Net amount received by all sellers.
    pub total_charge_to_sellers: M,
    /// Units each buyer ends up with.
    pub tasks_executed: BTreeMap<AgentId, usize>,
}

/// Utility of `agent` (with its true valuation) in `outcome`.
pub fn true_utility<M: Money>(outcome: &Outcome<M>, agent: &Agent<M>) -> M {
    let units = outcome.units_of(agent.id).min(agent.valuation.capacity());
    let paid = outcome.payment_of(agent.id);
    let v = &agent.valuation;
    match agent.side {
        Side::Buyer => v.cumulative(units).unwrap_or_else(|_| v.total()) - paid,
        Side::Seller => -paid - v.tail_value(units).unwrap_or_else(|_| v.total()),
    }
}

/// Metrics of `outcome`, evaluated with the valuations in `truth` even if
/// the run used different reports.
pub fn collect_metrics<M: Money>(outcome: &Outcome<M>, truth: &MarketInstance<M>) -> RunMetrics<M> {
    let mut m = RunMetrics {
        agent_utilities: BTreeMap::new(),
        platform_utility: outcome.platform_revenue(),
        total_charge_to_sellers: M::zero(),
        tasks_executed: BTreeMap::new(),
    };
    for a in &truth.agents {
        m.agent_utilities.insert(a.id, true_utility(outcome, a));
        match a.side {
            Side::Buyer => {
                m.tasks_executed.insert(a.id, outcome.units_of(a.id));
            }
            Side::Seller => m.total_charge_to_sellers -= outcome.payment_of(a.id),
        }
    }
    m
}

/// How many of a requester's tasks get executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskModel {
    /// Every unit the requester bought.
    #[default]
    Allocated,
    /// Each of the requester's `Λ` tasks independently with probability
    /// `1/log10 Λ`.
    InverseLog10,
}

pub fn execute_tasks<M: Money, R: Rng>(
    outcome: &Outcome<M>,
    truth: &MarketInstance<M>,
    model: TaskModel,
    rng: &mut R,
) -> BTreeMap<AgentId, usize> {
    truth
        .agents
        .iter()
        .filter(|a| a.side == Side::Buyer)
        .map(|a| {
            let n = match model {
                TaskModel::Allocated => outcome.units_of(a.id),
                TaskModel::InverseLog10 => {
                    let lambda = a.valuation.capacity() as u64;
                    let b = Binomial::new(lambda, execution_probability(lambda)).expect("probability in [0, 1]");
                    b.sample(rng) as usize
                }
            };
            (a.id, n)
        })
        .collect()
}

/// One strictly profitable misreport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct ProfitableDeviation<M> {
    pub agent: AgentId,
    pub reported: Vec<M>,
    pub gain: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct DeviationReport<M> {
    pub trials: usize,
    pub profitable: usize,
    /// Largest utility change seen (may be negative if every deviation hurt).
    pub max_gain: Option<M>,
    /// The first few profitable deviations, for diagnosis.
    pub examples: Vec<ProfitableDeviation<M>>,
}

impl<M: Money> DeviationReport<M> {
    fn new() -> Self {
        Self { trials: 0, profitable: 0, max_gain: None, examples: Vec::new() }
    }

    pub fn merge(&mut self, other: DeviationReport<M>) {
        self.trials += other.trials;
        self.profitable += other.profitable;
        self.max_gain = match (self.max_gain, other.max_gain) {
            (Some(a), Some(b)) => Some(if b > a { b } else { a }),
            (a, b) => a.or(b),
        };
        self.examples.extend(other.examples);
        self.examples.truncate(8);
    }
}

fn positive<M: Money>(x: f64) -> M {
    let floor = M::min_positive().unwrap_or_else(|| M::quantize(1e-3).unwrap_or_else(M::one));
    match M::quantize(x) {
        Some(v) if v >= floor => v,
        _ => floor,
    }
}

/// A random DMR misreport of `truth` with the same number of units.
///
/// Mixes global rescaling, single-marginal edits, additive shifts, fully
/// random reports and copies of other agents' values one grid step either
/// side (the points where outcomes flip).
pub fn perturb<M: Money, R: Rng>(truth: &MarginalValuation<M>, others: &[M], rng: &mut R) -> MarginalValuation<M> {
    let mut ms: Vec<M> = truth.marginals().to_vec();
    let top = ms.iter().map(|m| m.as_f64()).fold(1.0_f64, f64::max);
    let step = M::min_positive().map(|s| s.as_f64()).unwrap_or(top * 1e-3);
    match rng.random_range(0..5) {
        0 => {
            let f = rng.random_range(0.2..2.5);
            ms = ms.iter().map(|m| positive(m.as_f64() * f)).collect();
        }
        1 => {
            let i = rng.random_range(0..ms.len());
            ms[i] = positive(rng.random_range(0.0..2.0 * top));
        }
        2 => {
            let d = rng.random_range(-top..top);
            ms = ms.iter().map(|m| positive(m.as_f64() + d)).collect();
        }
        3 => {
            ms = ms.iter().map(|_| positive(rng.random_range(0.0..2.0 * top))).collect();
        }
        _ => {
            let edits = rng.random_range(1..=ms.len());
            for _ in 0..edits {
                let i = rng.random_range(0..ms.len());
                let base = others.choose(rng).map(|m| m.as_f64()).unwrap_or(top);
                let nudge = [-step, 0.0, step][rng.random_range(0..3)];
                ms[i] = positive(base + nudge);
            }
        }
    }
    ms.sort_by(|a, b| money_cmp(b, a));
    MarginalValuation::new(ms).expect("sorted positive marginals are DMR")
}

/// Randomized search for profitable unilateral misreports.
///
/// Each trial picks one agent of `instance`, replaces its report with
/// [`perturb`], reruns `runner` (which must be deterministic given the
/// instance, including its seed) and compares true utilities.
pub fn deviation_test<M, F, R>(runner: F, instance: &MarketInstance<M>, trials: usize, rng: &mut R) -> DeviationReport<M>
where
    M: Money,
    F: Fn(&MarketInstance<M>) -> Outcome<M>,
    R: Rng,
{
    let mut report = DeviationReport::new();
    if instance.agents.is_empty() {
        return report;
    }
    let honest = runner(instance);
    for _ in 0..trials {
        let agent = &instance.agents[rng.random_range(0..instance.agents.len())];
        let others: Vec<M> = instance
            .agents
            .iter()
            .filter(|a| a.id != agent.id && a.category == agent.category)
            .flat_map(|a| a.valuation.marginals().iter().copied())
            .collect();
        let lie = perturb(&agent.valuation, &others, rng);
        let outcome = runner(&instance.with_report(agent.id, lie.clone()));
        let gain = true_utility(&outcome, agent) - true_utility(&honest, agent);
        report.trials += 1;
        if report.max_gain.is_none_or(|g| gain > g) {
            report.max_gain = Some(gain);
        }
        if gain > M::zero() {
            report.profitable += 1;
            if report.examples.len() < 8 {
                report.examples.push(ProfitableDeviation { agent: agent.id, reported: lie.marginals().to_vec(), gain });
            }
        }
    }
    report
}
