use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Arena;
use crate::model::{virtualize, AgentId, Side, VirtualAgent};
use crate::money::{money_cmp, Money};

/// Arena quantities at the opposite arena's price.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossEvaluation {
    pub demand: usize,
    pub supply: usize,
    /// Buyers with positive demand and their quantities.
    pub active_buyers: Vec<(AgentId, usize)>,
    /// Sellers with positive supply and their quantities.
    pub active_sellers: Vec<(AgentId, usize)>,
}

pub fn cross_evaluate<M: Money>(arena: &Arena<M>, foreign_price: M) -> CrossEvaluation {
    let active = |agents: &[crate::model::Agent<M>]| -> Vec<(AgentId, usize)> {
        agents
            .iter()
            .map(|a| (a.id, a.quantity_at(foreign_price)))
            .filter(|&(_, q)| q > 0)
            .collect()
    };
    let active_buyers = active(&arena.buyers);
    let active_sellers = active(&arena.sellers);
    CrossEvaluation {
        demand: active_buyers.iter().map(|&(_, q)| q).sum(),
        supply: active_sellers.iter().map(|&(_, q)| q).sum(),
        active_buyers,
        active_sellers,
    }
}

/// Winner sets of one arena.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct Winners<M> {
    pub buyers: Vec<VirtualAgent<M>>,
    pub sellers: Vec<VirtualAgent<M>>,
    /// The long side, if any units had to be turned away.
    pub rationed: Option<Side>,
    /// Active units of the rationed side that did not win, in priority order.
    pub excluded: Vec<VirtualAgent<M>>,
}

/// Buyers by value descending, sellers ascending; equal values by tiebreak key.
pub fn priority_cmp<M: Money>(a: &VirtualAgent<M>, b: &VirtualAgent<M>) -> Ordering {
    let by_value = match a.side {
        Side::Buyer => money_cmp(&b.value, &a.value),
        Side::Seller => money_cmp(&a.value, &b.value),
    };
    by_value.then(a.tiebreak.cmp(&b.tiebreak)).then(a.owner.cmp(&b.owner)).then(a.unit_index.cmp(&b.unit_index))
}

fn active_units<M: Money>(arena: &Arena<M>, side: Side, price: M, seed: u64) -> Vec<VirtualAgent<M>> {
    let agents = match side {
        Side::Buyer => &arena.buyers,
        Side::Seller => &arena.sellers,
    };
    agents
        .iter()
        .flat_map(|a| virtualize(a, seed))
        .filter(|v| match side {
            Side::Buyer => v.value > price,
            Side::Seller => v.value < price,
        })
        .collect()
}

/// Allocation at the foreign price. When demand and supply differ the long
/// side is served in priority order up to the short side's quantity.
pub fn determine_winners<M: Money>(
    arena: &Arena<M>,
    demand: usize,
    supply: usize,
    foreign_price: M,
    seed: u64,
) -> Winners<M> {
    let mut buyers = active_units(arena, Side::Buyer, foreign_price, seed);
    let mut sellers = active_units(arena, Side::Seller, foreign_price, seed);
    debug_assert_eq!(buyers.len(), demand);
    debug_assert_eq!(supply, sellers.len());
    let demand = buyers.len();
    let supply = sellers.len();
    buyers.sort_by(priority_cmp);
    sellers.sort_by(priority_cmp);
    match demand.cmp(&supply) {
        Ordering::Equal => Winners { buyers, sellers, rationed: None, excluded: Vec::new() },
        Ordering::Greater => {
            let excluded = buyers.split_off(supply);
            Winners { buyers, sellers, rationed: Some(Side::Buyer), excluded }
        }
        Ordering::Less => {
            let excluded = sellers.split_off(demand);
            Winners { buyers, sellers, rationed: Some(Side::Seller), excluded }
        }
    }
}

/// Trading fees on the rationed side.
///
/// An agent winning `t` units pays the summed surplus `|value − price|` of
/// the `t` best excluded units owned by others, i.e. the surplus its units
/// displace. Everyone else pays nothing.
pub fn compute_fees<M: Money>(winners: &Winners<M>, foreign_price: M) -> BTreeMap<AgentId, M> {
    let mut fees = BTreeMap::new();
    let long_side = match winners.rationed {
        Some(Side::Buyer) => &winners.buyers,
        Some(Side::Seller) => &winners.sellers,
        None => return fees,
    };
    let mut won: BTreeMap<AgentId, usize> = BTreeMap::new();
    for v in long_side {
        *won.entry(v.owner).or_default() += 1;
    }
    for (owner, units) in won {
        let fee: M = winners
            .excluded
            .iter()
            .filter(|v| v.owner != owner)
            .take(units)
            .map(|v| {
                let surplus = (v.value - foreign_price).abs();
                if surplus > M::zero() {
                    surplus
                } else {
                    M::zero()
                }
            })
            .sum();
        fees.insert(owner, fee);
    }
    fees
}
