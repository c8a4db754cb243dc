use serde::{Deserialize, Serialize};

use super::{AuctionError, Arena};
use crate::money::{first_grid_multiple, midpoint, money_cmp, Money};

/// Result of the ascending price scan in one arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct EquilibriumReport<M> {
    pub price: M,
    pub grid_step: M,
    /// Total demand at `ε, 2ε, …, price`.
    pub demand_trace: Vec<usize>,
    /// Total supply at `ε, 2ε, …, price`.
    pub supply_trace: Vec<usize>,
    /// Demand equals supply at `price`.
    pub converged: bool,
}

impl<M: Money> EquilibriumReport<M> {
    /// Report for an arena with no agents.
    pub fn empty(grid_step: M) -> Self {
        Self { price: grid_step, grid_step, demand_trace: Vec::new(), supply_trace: Vec::new(), converged: false }
    }

    pub fn demand(&self) -> usize {
        self.demand_trace.last().copied().unwrap_or(0)
    }

    pub fn supply(&self) -> usize {
        self.supply_trace.last().copied().unwrap_or(0)
    }

    /// `(price, demand, supply)` at every scanned grid point.
    pub fn trace(&self) -> impl Iterator<Item = (M, usize, usize)> + '_ {
        self.demand_trace
            .iter()
            .zip(&self.supply_trace)
            .enumerate()
            .map(move |(i, (&d, &s))| (self.grid_step * M::from_units(i as u64 + 1), d, s))
    }
}

/// All virtual values of an arena, sorted for counting.
pub(crate) struct ValueBook<M> {
    /// Buyer marginals, descending.
    bids: Vec<M>,
    /// Seller marginals, ascending.
    asks: Vec<M>,
}

impl<M: Money> ValueBook<M> {
    pub(crate) fn new(arena: &Arena<M>) -> Self {
        let mut bids: Vec<M> = arena.buyers.iter().flat_map(|a| a.valuation.marginals().iter().copied()).collect();
        let mut asks: Vec<M> = arena.sellers.iter().flat_map(|a| a.valuation.marginals().iter().copied()).collect();
        bids.sort_by(|a, b| money_cmp(b, a));
        asks.sort_by(money_cmp);
        Self { bids, asks }
    }

    pub(crate) fn demand(&self, p: M) -> usize {
        self.bids.partition_point(|b| *b > p)
    }

    pub(crate) fn supply(&self, p: M) -> usize {
        self.asks.partition_point(|s| *s < p)
    }

    fn max_value(&self) -> Option<M> {
        let b = self.bids.first().copied();
        let s = self.asks.last().copied();
        match (b, s) {
            (Some(b), Some(s)) => Some(if b > s { b } else { s }),
            (b, s) => b.or(s),
        }
    }
}

/// Ascending scan `p = ε, 2ε, …` stopping at the first `p` where total
/// demand no longer exceeds total supply.
pub fn find_equilibrium_price<M: Money>(arena: &Arena<M>, epsilon: M) -> Result<EquilibriumReport<M>, AuctionError> {
    if !(epsilon > M::zero()) {
        return Err(AuctionError::InvalidStep);
    }
    if arena.buyers.is_empty() && arena.sellers.is_empty() {
        return Err(AuctionError::EmptyArena);
    }
    let book = ValueBook::new(arena);
    let ceiling = book.max_value().unwrap_or(M::zero()) + epsilon;
    let mut demand_trace = Vec::new();
    let mut supply_trace = Vec::new();
    let mut k: u64 = 1;
    loop {
        let p = epsilon * M::from_units(k);
        let d = book.demand(p);
        let s = book.supply(p);
        demand_trace.push(d);
        supply_trace.push(s);
        if d <= s {
            return Ok(EquilibriumReport { price: p, grid_step: epsilon, demand_trace, supply_trace, converged: d == s });
        }
        debug_assert!(p <= ceiling, "scan passed max value + epsilon");
        k += 1;
    }
}

/// Crossing located directly from the sorted value lists.
///
/// The set of prices where demand does not exceed supply is an up-ray
/// starting at `lower`; it contains `lower` itself iff `inclusive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct ExactEquilibrium<M> {
    pub lower: M,
    pub inclusive: bool,
    /// A price inside the first cell of the ray.
    pub price: M,
    pub demand: usize,
    pub supply: usize,
}

impl<M: Money> ExactEquilibrium<M> {
    /// First multiple of `step` inside the ray; equals the ε-scan price.
    pub fn grid_price(&self, step: M) -> M {
        step * M::from_units(first_grid_multiple(self.lower, step, self.inclusive))
    }
}

pub fn find_equilibrium_exact<M: Money>(arena: &Arena<M>) -> Result<ExactEquilibrium<M>, AuctionError> {
    if arena.buyers.is_empty() && arena.sellers.is_empty() {
        return Err(AuctionError::EmptyArena);
    }
    let book = ValueBook::new(arena);
    let mut points: Vec<M> = book.bids.iter().chain(&book.asks).copied().collect();
    points.sort_by(money_cmp);
    points.dedup_by(|a, b| money_cmp(a, b).is_eq());

    let clears = |p: M| book.demand(p) <= book.supply(p);
    // Demand and supply are constant on each open interval between
    // consecutive values, so one interior point represents the interval.
    let interior = |lo: M, hi: Option<M>| match hi {
        Some(hi) => {
            let m = midpoint(lo, hi);
            if m > lo && m < hi {
                m
            } else {
                hi
            }
        }
        None => lo + M::one(),
    };

    let first = points[0];
    let below_all = interior(M::zero(), Some(first));
    if below_all > M::zero() && below_all < first && clears(below_all) {
        return Ok(ExactEquilibrium {
            lower: M::zero(),
            inclusive: false,
            price: below_all,
            demand: book.demand(below_all),
            supply: book.supply(below_all),
        });
    }
    for (i, &v) in points.iter().enumerate() {
        if clears(v) {
            return Ok(ExactEquilibrium { lower: v, inclusive: true, price: v, demand: book.demand(v), supply: book.supply(v) });
        }
        let p = interior(v, points.get(i + 1).copied());
        if clears(p) {
            return Ok(ExactEquilibrium { lower: v, inclusive: false, price: p, demand: book.demand(p), supply: book.supply(p) });
        }
    }
    unreachable!("above every value demand is zero")
}

#[cfg(test)]
/// Quantity an arena's side wants at `p`, summed per agent.
pub(crate) fn side_total<M: Money>(arena: &Arena<M>, side: crate::model::Side, p: M) -> usize {
    use crate::model::Side;
    let agents = match side {
        Side::Buyer => &arena.buyers,
        Side::Seller => &arena.sellers,
    };
    agents.iter().map(|a| a.quantity_at(p)).sum()
}
