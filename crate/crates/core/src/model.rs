//! Market participants, valuations and the per-agent utility arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;
use crate::rng::{derive_seed, purpose};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ModelError {
    #[error("valuation has no units")]
    Empty,
    #[error("marginal {index} increases over its predecessor (not DMR)")]
    NotDmr { index: usize },
    #[error("marginal {index} is not strictly positive")]
    NonPositive { index: usize },
    #[error("{units} units requested but capacity is {capacity}")]
    OutOfRange { units: usize, capacity: usize },
    #[error("agent id {0} appears more than once")]
    DuplicateAgent(AgentId),
    #[error("agent {agent} has category {category}, instance has {categories}")]
    CategoryOutOfRange { agent: AgentId, category: usize, categories: usize },
    #[error("category {category} has no {side}s")]
    EmptyCategory { category: usize, side: Side },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Buyer,
    Seller,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Buyer => f.write_str("buyer"),
            Side::Seller => f.write_str("seller"),
        }
    }
}

/// Per-unit values of an agent, non-increasing and strictly positive.
///
/// For a buyer, `marginals[f]` is the value of the `(f+1)`-th task. For a
/// seller the same shape is used and a sale of `f` units gives up the `f`
/// lowest marginals (the tail).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct MarginalValuation<M> {
    marginals: Vec<M>,
}

impl<M: Money> MarginalValuation<M> {
    pub fn new(marginals: Vec<M>) -> Result<Self, ModelError> {
        if marginals.is_empty() {
            return Err(ModelError::Empty);
        }
        for (index, m) in marginals.iter().enumerate() {
            if !(*m > M::zero()) {
                return Err(ModelError::NonPositive { index });
            }
        }
        for (index, w) in marginals.windows(2).enumerate() {
            if !(w[0] >= w[1]) {
                return Err(ModelError::NotDmr { index: index + 1 });
            }
        }
        Ok(Self { marginals })
    }

    pub fn marginals(&self) -> &[M] {
        &self.marginals
    }

    /// Number of units (the agent's `Q`).
    pub fn capacity(&self) -> usize {
        self.marginals.len()
    }

    /// `ν(f)`, the value of holding `f` units. `ν(0) = 0`.
    pub fn cumulative(&self, f: usize) -> Result<M, ModelError> {
        self.check_units(f)?;
        Ok(self.marginals[..f].iter().copied().sum())
    }

    pub fn total(&self) -> M {
        self.marginals.iter().copied().sum()
    }

    /// Value of the `f` lowest marginals, `ν(Q) − ν(Q−f)`.
    pub fn tail_value(&self, f: usize) -> Result<M, ModelError> {
        self.check_units(f)?;
        Ok(self.marginals[self.marginals.len() - f..].iter().copied().sum())
    }

    /// Scales every marginal, keeping the result a valid valuation.
    pub fn scaled(&self, factor: f64) -> Self {
        let floor = M::min_positive();
        let marginals = self
            .marginals
            .iter()
            .map(|m| {
                let s = m.scale(factor);
                match floor {
                    Some(f) if s < f => f,
                    _ => s,
                }
            })
            .collect();
        Self { marginals }
    }

    fn check_units(&self, f: usize) -> Result<(), ModelError> {
        if f > self.marginals.len() {
            Err(ModelError::OutOfRange { units: f, capacity: self.marginals.len() })
        } else {
            Ok(())
        }
    }
}

pub fn validate_dmr<M: Money>(marginals: &[M]) -> Result<MarginalValuation<M>, ModelError> {
    MarginalValuation::new(marginals.to_vec())
}

/// Buyer utility of receiving `f` tasks at unit price `p`: `ν(f) − f·p`.
pub fn buyer_utility<M: Money>(v: &MarginalValuation<M>, f: usize, p: M) -> Result<M, ModelError> {
    Ok(v.cumulative(f)? - M::from_units(f as u64) * p)
}

/// Seller utility of serving `f` tasks at unit price `p`: `f·p − (ν(Q) − ν(Q−f))`.
pub fn seller_utility<M: Money>(v: &MarginalValuation<M>, f: usize, p: M) -> Result<M, ModelError> {
    Ok(M::from_units(f as u64) * p - v.tail_value(f)?)
}

/// Number of marginals strictly above `p`.
pub fn demand_at_price<M: Money>(v: &MarginalValuation<M>, p: M) -> usize {
    v.marginals.partition_point(|m| *m > p)
}

/// Number of marginals strictly below `p`.
pub fn supply_at_price<M: Money>(v: &MarginalValuation<M>, p: M) -> usize {
    v.marginals.len() - v.marginals.partition_point(|m| *m >= p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct Agent<M> {
    pub id: AgentId,
    pub side: Side,
    pub category: usize,
    pub valuation: MarginalValuation<M>,
}

impl<M: Money> Agent<M> {
    pub fn buyer(id: u32, category: usize, valuation: MarginalValuation<M>) -> Self {
        Self { id: AgentId(id), side: Side::Buyer, category, valuation }
    }

    pub fn seller(id: u32, category: usize, valuation: MarginalValuation<M>) -> Self {
        Self { id: AgentId(id), side: Side::Seller, category, valuation }
    }

    /// Quantity this agent wants to trade at `p` given its side.
    pub fn quantity_at(&self, p: M) -> usize {
        match self.side {
            Side::Buyer => demand_at_price(&self.valuation, p),
            Side::Seller => supply_at_price(&self.valuation, p),
        }
    }

    /// Utility of trading `units` at `p` under this agent's valuation.
    /// Quantities past capacity are clamped for buyers (extra units carry no
    /// value) and rejected for sellers.
    pub fn utility(&self, units: usize, p: M) -> Result<M, ModelError> {
        match self.side {
            Side::Buyer => {
                let held = units.min(self.valuation.capacity());
                Ok(self.valuation.cumulative(held)? - M::from_units(units as u64) * p)
            }
            Side::Seller => seller_utility(&self.valuation, units, p),
        }
    }
}

/// One unit of a multi-unit agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct VirtualAgent<M> {
    pub owner: AgentId,
    pub side: Side,
    /// 1-based position in the owner's marginal list.
    pub unit_index: usize,
    pub value: M,
    /// Seeded key for ordering equal values.
    pub tiebreak: u64,
}

/// Tiebreak key of one unit. Depends only on the seed and the unit's
/// identity, never on reported values.
pub fn tiebreak_key(seed: u64, owner: AgentId, unit_index: usize) -> u64 {
    derive_seed(seed, &[purpose::TIEBREAK, owner.0 as u64, unit_index as u64])
}

pub fn virtualize<M: Money>(agent: &Agent<M>, seed: u64) -> Vec<VirtualAgent<M>> {
    agent
        .valuation
        .marginals()
        .iter()
        .enumerate()
        .map(|(i, &value)| VirtualAgent {
            owner: agent.id,
            side: agent.side,
            unit_index: i + 1,
            value,
            tiebreak: tiebreak_key(seed, agent.id, i + 1),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct MechanismParams<M> {
    /// Price grid step of the equilibrium scan.
    pub epsilon: M,
    /// Graders per quality round.
    pub gamma: usize,
    /// Candidates per quality round.
    pub beta: usize,
    pub rng_seed: u64,
    /// Restrict sellers to the devices selected by the quality rounds.
    pub quality_filter: bool,
}

impl<M: Money> MechanismParams<M> {
    pub fn new(epsilon: M, rng_seed: u64) -> Self {
        Self { epsilon, gamma: 3, beta: 3, rng_seed, quality_filter: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct MarketInstance<M> {
    pub categories: usize,
    pub agents: Vec<Agent<M>>,
    pub params: MechanismParams<M>,
}

impl<M: Money> MarketInstance<M> {
    pub fn new(categories: usize, agents: Vec<Agent<M>>, params: MechanismParams<M>) -> Result<Self, ModelError> {
        if !(params.epsilon > M::zero()) {
            return Err(ModelError::InvalidParameter("epsilon must be positive".into()));
        }
        if params.gamma == 0 || params.beta == 0 {
            return Err(ModelError::InvalidParameter("gamma and beta must be at least 1".into()));
        }
        let mut seen = BTreeSet::new();
        let mut buyers = vec![0usize; categories];
        let mut sellers = vec![0usize; categories];
        for a in &agents {
            if !seen.insert(a.id) {
                return Err(ModelError::DuplicateAgent(a.id));
            }
            if a.category >= categories {
                return Err(ModelError::CategoryOutOfRange { agent: a.id, category: a.category, categories });
            }
            match a.side {
                Side::Buyer => buyers[a.category] += 1,
                Side::Seller => sellers[a.category] += 1,
            }
        }
        for category in 0..categories {
            if buyers[category] == 0 {
                return Err(ModelError::EmptyCategory { category, side: Side::Buyer });
            }
            if sellers[category] == 0 {
                return Err(ModelError::EmptyCategory { category, side: Side::Seller });
            }
        }
        Ok(Self { categories, agents, params })
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent<M>> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn category_agents(&self, category: usize) -> impl Iterator<Item = &Agent<M>> {
        self.agents.iter().filter(move |a| a.category == category)
    }

    /// Copy of the instance with one agent's reported valuation replaced.
    pub fn with_report(&self, id: AgentId, valuation: MarginalValuation<M>) -> Self {
        let mut out = self.clone();
        if let Some(a) = out.agents.iter_mut().find(|a| a.id == id) {
            a.valuation = valuation;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Venue {
    Left,
    Right,
    /// Whole category market (benchmark mechanisms).
    Market,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    Quad,
    McAfee,
    PostedPrice,
}

/// Trades executed in one venue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct Settlement<M> {
    pub venue: Venue,
    /// Unit price paid by winning buyers (before fees).
    pub buyer_price: M,
    /// Unit price received by winning sellers (before fees).
    pub seller_price: M,
    pub winning_buyers: Vec<VirtualAgent<M>>,
    pub winning_sellers: Vec<VirtualAgent<M>>,
    pub fees: BTreeMap<AgentId, M>,
}

impl<M: Money> Settlement<M> {
    pub fn empty(venue: Venue, price: M) -> Self {
        Self {
            venue,
            buyer_price: price,
            seller_price: price,
            winning_buyers: Vec::new(),
            winning_sellers: Vec::new(),
            fees: BTreeMap::new(),
        }
    }

    pub fn units_of(&self, id: AgentId) -> usize {
        self.winning_buyers.iter().chain(&self.winning_sellers).filter(|v| v.owner == id).count()
    }

    /// Price spread kept by the platform, `units · (buyer_price − seller_price)`.
    pub fn spread(&self) -> M {
        M::from_units(self.winning_buyers.len() as u64) * self.buyer_price
            - M::from_units(self.winning_sellers.len() as u64) * self.seller_price
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct CategoryOutcome<M> {
    pub category: usize,
    pub settlements: Vec<Settlement<M>>,
    /// Devices admitted by the quality rounds, when filtering is on.
    pub quality_devices: Option<Vec<AgentId>>,
    /// Net transfer per agent; positive means the agent pays.
    pub payments: BTreeMap<AgentId, M>,
    pub fees: BTreeMap<AgentId, M>,
    pub platform_revenue: M,
}

impl<M: Money> CategoryOutcome<M> {
    /// Builds payments, fees and revenue from the settlements.
    pub fn from_settlements(category: usize, settlements: Vec<Settlement<M>>, quality_devices: Option<Vec<AgentId>>) -> Self {
        let mut payments: BTreeMap<AgentId, M> = BTreeMap::new();
        let mut fees: BTreeMap<AgentId, M> = BTreeMap::new();
        let mut revenue = M::zero();
        for s in &settlements {
            for v in &s.winning_buyers {
                *payments.entry(v.owner).or_insert_with(M::zero) += s.buyer_price;
            }
            for v in &s.winning_sellers {
                *payments.entry(v.owner).or_insert_with(M::zero) -= s.seller_price;
            }
            for (&id, &fee) in &s.fees {
                *payments.entry(id).or_insert_with(M::zero) += fee;
                *fees.entry(id).or_insert_with(M::zero) += fee;
                revenue += fee;
            }
            revenue += s.spread();
        }
        Self { category, settlements, quality_devices, payments, fees, platform_revenue: revenue }
    }

    pub fn empty(category: usize, quality_devices: Option<Vec<AgentId>>) -> Self {
        Self::from_settlements(category, Vec::new(), quality_devices)
    }

    pub fn settlement(&self, venue: Venue) -> Option<&Settlement<M>> {
        self.settlements.iter().find(|s| s.venue == venue)
    }

    pub fn units_of(&self, id: AgentId) -> usize {
        self.settlements.iter().map(|s| s.units_of(id)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFailure {
    pub category: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct Outcome<M> {
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub categories: Vec<Result<CategoryOutcome<M>, CategoryFailure>>,
}

impl<M: Money> Outcome<M> {
    pub fn completed(&self) -> impl Iterator<Item = &CategoryOutcome<M>> {
        self.categories.iter().filter_map(|c| c.as_ref().ok())
    }

    pub fn platform_revenue(&self) -> M {
        self.completed().map(|c| c.platform_revenue).sum()
    }

    pub fn units_of(&self, id: AgentId) -> usize {
        self.completed().map(|c| c.units_of(id)).sum()
    }

    pub fn fee_of(&self, id: AgentId) -> M {
        self.completed().filter_map(|c| c.fees.get(&id).copied()).sum()
    }

    pub fn payment_of(&self, id: AgentId) -> M {
        self.completed().filter_map(|c| c.payments.get(&id).copied()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[i64]) -> MarginalValuation<i64> {
        validate_dmr(xs).unwrap()
    }

    #[test]
    fn dmr_validation() {
        assert!(validate_dmr(&[5i64, 4, 1]).is_ok());
        assert_eq!(validate_dmr(&[2i64, 5, 3]), Err(ModelError::NotDmr { index: 1 }));
        assert!(validate_dmr(&[7i64]).is_ok());
        assert_eq!(validate_dmr(&[3i64, 0]), Err(ModelError::NonPositive { index: 1 }));
        assert_eq!(validate_dmr::<i64>(&[]), Err(ModelError::Empty));
        assert!(validate_dmr(&[f64::NAN]).is_err());
    }

    #[test]
    fn buyer_utility_examples() {
        assert_eq!(buyer_utility(&v(&[5, 4, 1]), 2, 3), Ok(3));
        assert_eq!(buyer_utility(&v(&[5, 4, 1]), 0, 3), Ok(0));
        assert_eq!(buyer_utility(&v(&[7]), 1, 7), Ok(0));
        assert_eq!(buyer_utility(&v(&[7]), 2, 7), Err(ModelError::OutOfRange { units: 2, capacity: 1 }));
    }

    #[test]
    fn seller_utility_examples() {
        assert_eq!(seller_utility(&v(&[6, 4, 2]), 1, 5), Ok(3));
        assert_eq!(seller_utility(&v(&[6, 4, 2]), 0, 11), Ok(0));
        assert_eq!(seller_utility(&v(&[6, 4, 2]), 3, 4), Ok(0));
        assert!(seller_utility(&v(&[6, 4, 2]), 4, 4).is_err());
    }

    #[test]
    fn demand_examples() {
        assert_eq!(demand_at_price(&v(&[5, 4, 1]), 3), 2);
        assert_eq!(demand_at_price(&v(&[5, 4, 1]), 0), 3);
        // Brute-force count of {5,4,1} strictly above 5 is zero.
        assert_eq!(demand_at_price(&v(&[5, 4, 1]), 5), 0);
        assert_eq!(demand_at_price(&v(&[5, 4, 1]), 4), 1);
    }

    #[test]
    fn supply_examples() {
        assert_eq!(supply_at_price(&v(&[6, 4, 2]), 5), 2);
        assert_eq!(supply_at_price(&v(&[6, 4, 2]), 0), 0);
        assert_eq!(supply_at_price(&v(&[6, 4, 2]), 100), 3);
        assert_eq!(supply_at_price(&v(&[6, 4, 2]), 4), 1);
    }

    #[test]
    fn virtual_expansion() {
        let a = Agent::buyer(1, 0, v(&[5, 4, 1]));
        let units = virtualize(&a, 9);
        assert_eq!(units.iter().map(|u| u.value).collect::<Vec<_>>(), vec![5, 4, 1]);
        assert_eq!(units.iter().map(|u| u.unit_index).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(virtualize(&Agent::buyer(2, 0, v(&[7])), 9).len(), 1);
    }

    #[test]
    fn tiebreak_depends_only_on_seed_and_identity() {
        let a = Agent::buyer(1, 0, v(&[4]));
        let b = Agent::buyer(2, 0, v(&[4]));
        let ka = virtualize(&a, 3)[0].tiebreak;
        let kb = virtualize(&b, 3)[0].tiebreak;
        assert_ne!(ka, kb);
        let a_other_value = Agent::buyer(1, 0, v(&[9]));
        assert_eq!(virtualize(&a_other_value, 3)[0].tiebreak, ka);
        assert_ne!(virtualize(&a, 4)[0].tiebreak, ka);
    }

    #[test]
    fn instance_validation() {
        let params = MechanismParams::new(1i64, 0);
        let ok = MarketInstance::new(1, vec![Agent::buyer(1, 0, v(&[5])), Agent::seller(2, 0, v(&[3]))], params.clone());
        assert!(ok.is_ok());
        let dup = MarketInstance::new(1, vec![Agent::buyer(1, 0, v(&[5])), Agent::seller(1, 0, v(&[3]))], params.clone());
        assert_eq!(dup.unwrap_err(), ModelError::DuplicateAgent(AgentId(1)));
        let no_seller = MarketInstance::new(1, vec![Agent::buyer(1, 0, v(&[5]))], params.clone());
        assert!(matches!(no_seller, Err(ModelError::EmptyCategory { side: Side::Seller, .. })));
        let bad_eps = MarketInstance::new(
            1,
            vec![Agent::buyer(1, 0, v(&[5])), Agent::seller(2, 0, v(&[3]))],
            MechanismParams::new(0i64, 0),
        );
        assert!(matches!(bad_eps, Err(ModelError::InvalidParameter(_))));
    }

    #[test]
    fn scaled_valuation_stays_valid() {
        let s = v(&[3, 2, 1]).scaled(0.1);
        assert!(MarginalValuation::new(s.marginals().to_vec()).is_ok());
        assert_eq!(v(&[10, 8]).scaled(1.25).marginals(), &[13, 10]);
    }
}
