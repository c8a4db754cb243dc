//! The quality-aware multi-unit double auction.
//!
//! Per category the (quality-filtered) agents are split into two arenas by
//! fair coin flips. Each arena finds its own clearing price by an ascending
//! ε-scan, but trades at the *other* arena's price, so no agent can move the
//! price it trades at. At that foreign price the long side is rationed by
//! value and its winners pay a fee equal to the surplus they displace.

mod allocation;
mod equilibrium;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use allocation::{compute_fees, cross_evaluate, determine_winners, priority_cmp, CrossEvaluation, Winners};
pub use equilibrium::{find_equilibrium_exact, find_equilibrium_price, EquilibriumReport, ExactEquilibrium};

use crate::model::{
    Agent, AgentId, CategoryFailure, CategoryOutcome, MarketInstance, MechanismKind, Outcome, Settlement, Side, Venue,
};
use crate::money::Money;
use crate::quality::{iot_qdbc, QualityError, QualityResult, RankOracle};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AuctionError {
    #[error("arena has neither buyers nor sellers")]
    EmptyArena,
    #[error("price step must be positive")]
    InvalidStep,
    #[error("quality selection failed: {0}")]
    Quality(#[from] QualityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArenaLabel {
    Left,
    Right,
}

impl From<ArenaLabel> for Venue {
    fn from(l: ArenaLabel) -> Self {
        match l {
            ArenaLabel::Left => Venue::Left,
            ArenaLabel::Right => Venue::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct Arena<M> {
    pub label: ArenaLabel,
    pub buyers: Vec<Agent<M>>,
    pub sellers: Vec<Agent<M>>,
}

impl<M: Money> Arena<M> {
    pub fn new(label: ArenaLabel, buyers: Vec<Agent<M>>, sellers: Vec<Agent<M>>) -> Self {
        Self { label, buyers, sellers }
    }

    pub fn is_empty(&self) -> bool {
        self.buyers.is_empty() && self.sellers.is_empty()
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.buyers.iter().chain(&self.sellers).any(|a| a.id == id)
    }
}

/// Places every agent independently in the left or right arena with
/// probability 1/2. One coin is drawn per agent, in input order.
pub fn split_market<M: Money, R: Rng>(agents: &[Agent<M>], rng: &mut R) -> (Arena<M>, Arena<M>) {
    let mut left = Arena::new(ArenaLabel::Left, Vec::new(), Vec::new());
    let mut right = Arena::new(ArenaLabel::Right, Vec::new(), Vec::new());
    for a in agents {
        let target = if rng.random_bool(0.5) { &mut left } else { &mut right };
        match a.side {
            Side::Buyer => target.buyers.push(a.clone()),
            Side::Seller => target.sellers.push(a.clone()),
        }
    }
    (left, right)
}

/// Everything computed for one arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct ArenaReport<M> {
    pub arena: Arena<M>,
    pub equilibrium: EquilibriumReport<M>,
    pub cross: CrossEvaluation,
    pub winners: Winners<M>,
    pub settlement: Settlement<M>,
}

/// Detailed trace of one category run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct CategoryRun<M> {
    pub quality: Option<QualityResult>,
    pub left: ArenaReport<M>,
    pub right: ArenaReport<M>,
    pub outcome: CategoryOutcome<M>,
}

/// Trades both arenas of an already split market.
pub fn clear_arenas<M: Money>(
    category: usize,
    left: Arena<M>,
    right: Arena<M>,
    epsilon: M,
    seed: u64,
    quality: Option<QualityResult>,
) -> Result<CategoryRun<M>, AuctionError> {
    if !(epsilon > M::zero()) {
        return Err(AuctionError::InvalidStep);
    }
    let quality_devices = quality.as_ref().map(|q| q.quality_devices.clone());
    let either_empty = left.is_empty() || right.is_empty();
    let eq_left = find_equilibrium_price(&left, epsilon).unwrap_or_else(|_| EquilibriumReport::empty(epsilon));
    let eq_right = find_equilibrium_price(&right, epsilon).unwrap_or_else(|_| EquilibriumReport::empty(epsilon));

    let settle = |arena: Arena<M>, own: EquilibriumReport<M>, foreign_price: M| {
        let cross = cross_evaluate(&arena, foreign_price);
        if either_empty {
            // No foreign price exists when the opposite arena is empty.
            let winners = Winners { buyers: Vec::new(), sellers: Vec::new(), rationed: None, excluded: Vec::new() };
            let settlement = Settlement::empty(arena.label.into(), foreign_price);
            return ArenaReport { arena, equilibrium: own, cross, winners, settlement };
        }
        let winners = determine_winners(&arena, cross.demand, cross.supply, foreign_price, seed);
        let fees = compute_fees(&winners, foreign_price);
        let settlement = Settlement {
            venue: arena.label.into(),
            buyer_price: foreign_price,
            seller_price: foreign_price,
            winning_buyers: winners.buyers.clone(),
            winning_sellers: winners.sellers.clone(),
            fees,
        };
        ArenaReport { arena, equilibrium: own, cross, winners, settlement }
    };

    let p_left = eq_left.price;
    let p_right = eq_right.price;
    let left = settle(left, eq_left, p_right);
    let right = settle(right, eq_right, p_left);
    let outcome = CategoryOutcome::from_settlements(
        category,
        vec![left.settlement.clone(), right.settlement.clone()],
        quality_devices,
    );
    Ok(CategoryRun { quality, left, right, outcome })
}

/// Agents that take part in a category's market: all buyers and either all
/// sellers or only the quality devices.
pub fn category_market<M: Money>(
    instance: &MarketInstance<M>,
    category: usize,
    oracle: &dyn RankOracle,
) -> Result<(Vec<Agent<M>>, Option<QualityResult>), AuctionError> {
    let agents: Vec<Agent<M>> = instance.category_agents(category).cloned().collect();
    if !instance.params.quality_filter {
        return Ok((agents, None));
    }
    let devices: Vec<AgentId> = agents.iter().filter(|a| a.side == Side::Seller).map(|a| a.id).collect();
    let mut rng = stream(instance.params.rng_seed, &[purpose::QUALITY, category as u64]);
    let quality = iot_qdbc(&devices, oracle, instance.params.gamma, instance.params.beta, &mut rng)?;
    let admitted: std::collections::BTreeSet<AgentId> = quality.quality_devices.iter().copied().collect();
    let market = agents.into_iter().filter(|a| a.side == Side::Buyer || admitted.contains(&a.id)).collect();
    Ok((market, Some(quality)))
}

pub fn run_quad_category<M: Money>(
    instance: &MarketInstance<M>,
    category: usize,
    oracle: &dyn RankOracle,
) -> Result<CategoryRun<M>, AuctionError> {
    let seed = instance.params.rng_seed;
    let (market, quality) = category_market(instance, category, oracle)?;
    let mut rng = stream(seed, &[purpose::SPLIT, category as u64]);
    let (left, right) = split_market(&market, &mut rng);
    clear_arenas(category, left, right, instance.params.epsilon, seed, quality)
}

/// Runs every category. A failing category is reported in place without
/// affecting the others.
pub fn run_quad<M: Money>(instance: &MarketInstance<M>, oracle: &dyn RankOracle) -> Outcome<M> {
    let categories = (0..instance.categories)
        .map(|c| {
            run_quad_category(instance, c, oracle)
                .map(|run| run.outcome)
                .map_err(|e| CategoryFailure { category: c, error: e.to_string() })
        })
        .collect();
    Outcome { mechanism: MechanismKind::Quad, seed: instance.params.rng_seed, categories }
}
