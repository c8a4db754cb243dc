//! Baseline mechanisms: McAfee's trade-reduction double auction and a
//! posted-price mechanism, plus the misreporting transform used for the
//! manipulated posted-price runs.

use std::collections::BTreeSet;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{category_market, priority_cmp, AuctionError};
use crate::model::{
    virtualize, Agent, AgentId, CategoryFailure, CategoryOutcome, MarketInstance, MechanismKind, Outcome, Settlement,
    Side, Venue, VirtualAgent,
};
use crate::money::{midpoint, money_cmp, Money};
use crate::quality::RankOracle;
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BenchmarkError {
    #[error("no buyer unit values at least the cheapest seller unit")]
    NoTrade,
    #[error("invalid benchmark parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    McAfee,
    Ppm,
    PpmD,
}

/// How the posted price is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", bound = "M: Money")]
pub enum PostedPriceRule<M> {
    /// Midpoint of a configured value range.
    MidRange { low: M, high: M },
    /// Lower median of the unit values of a random half of the agents. The
    /// sampled half sets the price and does not trade.
    SampledMedian,
}

/// Order in which willing units are served when one side is long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceOrder {
    /// Uniformly shuffled.
    Random,
    /// Highest reported bids and lowest reported asks first.
    #[default]
    ReportedPriority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct BenchmarkConfig<M> {
    pub mechanism: BenchmarkKind,
    /// Share of agents misreporting; only used by [`BenchmarkKind::PpmD`].
    pub deviation_fraction: f64,
    /// Buyers multiply bids by this factor, sellers divide asks by it.
    pub deviation_factor: f64,
    pub posted_price_rule: PostedPriceRule<M>,
    #[serde(default)]
    pub acceptance_order: AcceptanceOrder,
}

impl<M: Money> BenchmarkConfig<M> {
    pub fn new(mechanism: BenchmarkKind) -> Self {
        Self {
            mechanism,
            deviation_fraction: 0.5,
            deviation_factor: 1.25,
            posted_price_rule: PostedPriceRule::SampledMedian,
            acceptance_order: AcceptanceOrder::ReportedPriority,
        }
    }

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        if !(0.0..=1.0).contains(&self.deviation_fraction) {
            return Err(BenchmarkError::InvalidParameter("deviation_fraction must lie in [0, 1]".into()));
        }
        if !(self.deviation_factor.is_finite() && self.deviation_factor > 0.0) {
            return Err(BenchmarkError::InvalidParameter("deviation_factor must be positive".into()));
        }
        if let PostedPriceRule::MidRange { low, high } = self.posted_price_rule {
            if low > high {
                return Err(BenchmarkError::InvalidParameter("posted price range is empty".into()));
            }
        }
        Ok(())
    }
}

/// Trade quantity and prices chosen by McAfee's rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct McAfeeClearing<M> {
    /// Number of efficient trades `k`.
    pub efficient: usize,
    /// Trades executed: `k`, or `k − 1` after trade reduction.
    pub trades: usize,
    pub buyer_price: M,
    pub seller_price: M,
    pub reduced: bool,
}

/// Sorts both books in place (bids descending, asks ascending) and applies
/// McAfee's rule. `None` when no bid reaches the cheapest ask.
pub fn mcafee_clear<M: Money>(bids: &mut [VirtualAgent<M>], asks: &mut [VirtualAgent<M>]) -> Option<McAfeeClearing<M>> {
    bids.sort_by(priority_cmp);
    asks.sort_by(priority_cmp);
    let k = bids.iter().zip(asks.iter()).take_while(|(b, s)| b.value >= s.value).count();
    if k == 0 {
        return None;
    }
    let (bk, sk) = (bids[k - 1].value, asks[k - 1].value);
    // Without a (k+1)-th unit on both sides there is no candidate price.
    if let (Some(b), Some(s)) = (bids.get(k), asks.get(k)) {
        let p = midpoint(b.value, s.value);
        if sk <= p && p <= bk {
            return Some(McAfeeClearing { efficient: k, trades: k, buyer_price: p, seller_price: p, reduced: false });
        }
    }
    Some(McAfeeClearing { efficient: k, trades: k - 1, buyer_price: bk, seller_price: sk, reduced: true })
}

/// McAfee double auction over single-unit (virtual) agents.
pub fn mcafee_da<M: Money>(buyers: &[VirtualAgent<M>], sellers: &[VirtualAgent<M>]) -> Result<Settlement<M>, BenchmarkError> {
    let mut bids = buyers.to_vec();
    let mut asks = sellers.to_vec();
    let c = mcafee_clear(&mut bids, &mut asks).ok_or(BenchmarkError::NoTrade)?;
    bids.truncate(c.trades);
    asks.truncate(c.trades);
    Ok(Settlement {
        venue: Venue::Market,
        buyer_price: c.buyer_price,
        seller_price: c.seller_price,
        winning_buyers: bids,
        winning_sellers: asks,
        fees: Default::default(),
    })
}

fn virtual_units<M: Money>(agents: &[Agent<M>], side: Side, seed: u64) -> Vec<VirtualAgent<M>> {
    agents.iter().filter(|a| a.side == side).flat_map(|a| virtualize(a, seed)).collect()
}

/// Result of one posted-price run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "M: Money")]
pub struct PostedPriceResult<M> {
    pub price: Option<M>,
    /// Agents that only set the price (sampled-median rule).
    pub sampled: Vec<AgentId>,
    pub settlement: Settlement<M>,
}

fn lower_median<M: Money>(mut values: Vec<M>) -> Option<M> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(money_cmp);
    Some(values[(values.len() - 1) / 2])
}

/// Posted-price mechanism. Buyer units valued above the price and seller
/// units valued below it accept; the long side is served in `order` until
/// the short side is exhausted. Everyone trades at the posted price.
pub fn ppm<M: Money, R: Rng>(
    agents: &[Agent<M>],
    rule: &PostedPriceRule<M>,
    order: AcceptanceOrder,
    seed: u64,
    rng: &mut R,
) -> PostedPriceResult<M> {
    let (price, sampled, traders): (Option<M>, Vec<AgentId>, Vec<Agent<M>>) = match *rule {
        PostedPriceRule::MidRange { low, high } => (Some(midpoint(low, high)), Vec::new(), agents.to_vec()),
        PostedPriceRule::SampledMedian => {
            let mut sample = Vec::new();
            let mut traders = Vec::new();
            for a in agents {
                if rng.random_bool(0.5) {
                    sample.push(a);
                } else {
                    traders.push(a.clone());
                }
            }
            let values = sample.iter().flat_map(|a| a.valuation.marginals().iter().copied()).collect();
            (lower_median(values), sample.iter().map(|a| a.id).collect(), traders)
        }
    };
    let Some(p) = price else {
        return PostedPriceResult { price: None, sampled, settlement: Settlement::empty(Venue::Market, M::zero()) };
    };
    let mut bids: Vec<_> = virtual_units(&traders, Side::Buyer, seed).into_iter().filter(|v| v.value > p).collect();
    let mut asks: Vec<_> = virtual_units(&traders, Side::Seller, seed).into_iter().filter(|v| v.value < p).collect();
    match order {
        AcceptanceOrder::Random => {
            bids.shuffle(rng);
            asks.shuffle(rng);
        }
        AcceptanceOrder::ReportedPriority => {
            bids.sort_by(priority_cmp);
            asks.sort_by(priority_cmp);
        }
    }
    let trades = bids.len().min(asks.len());
    bids.truncate(trades);
    asks.truncate(trades);
    let settlement = Settlement {
        venue: Venue::Market,
        buyer_price: p,
        seller_price: p,
        winning_buyers: bids,
        winning_sellers: asks,
        fees: Default::default(),
    };
    PostedPriceResult { price: Some(p), sampled, settlement }
}

/// Replaces the reports of exactly `round(fraction · n)` randomly chosen
/// agents: buyers scale every marginal by `factor`, sellers by `1/factor`.
/// Returns the reported agents and the set of deviators; the input keeps
/// the true valuations.
pub fn apply_deviation<M: Money, R: Rng>(
    agents: &[Agent<M>],
    fraction: f64,
    factor: f64,
    rng: &mut R,
) -> (Vec<Agent<M>>, BTreeSet<AgentId>) {
    let count = ((fraction.clamp(0.0, 1.0) * agents.len() as f64).round() as usize).min(agents.len());
    let chosen: BTreeSet<usize> = (0..agents.len()).choose_multiple(rng, count).into_iter().collect();
    let mut deviators = BTreeSet::new();
    let reported = agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if !chosen.contains(&i) {
                return a.clone();
            }
            deviators.insert(a.id);
            let f = match a.side {
                Side::Buyer => factor,
                Side::Seller => 1.0 / factor,
            };
            Agent { valuation: a.valuation.scaled(f), ..a.clone() }
        })
        .collect();
    (reported, deviators)
}

/// McAfee on every category, over the same (quality-filtered) agent pool
/// QUAD would see.
pub fn run_mcafee<M: Money>(instance: &MarketInstance<M>, oracle: &dyn RankOracle) -> Outcome<M> {
    let seed = instance.params.rng_seed;
    let categories = (0..instance.categories)
        .map(|c| {
            let (market, quality) = category_market(instance, c, oracle).map_err(|e| failure(c, e))?;
            let quality_devices = quality.map(|q| q.quality_devices);
            let buyers = virtual_units(&market, Side::Buyer, seed);
            let sellers = virtual_units(&market, Side::Seller, seed);
            Ok(match mcafee_da(&buyers, &sellers) {
                Ok(s) => CategoryOutcome::from_settlements(c, vec![s], quality_devices),
                Err(_) => CategoryOutcome::empty(c, quality_devices),
            })
        })
        .collect();
    Outcome { mechanism: MechanismKind::McAfee, seed, categories }
}

/// Posted price on every category. Misreporting, if any, must already be
/// applied to `instance`.
pub fn run_ppm<M: Money>(
    instance: &MarketInstance<M>,
    oracle: &dyn RankOracle,
    rule: &PostedPriceRule<M>,
    order: AcceptanceOrder,
) -> Outcome<M> {
    let seed = instance.params.rng_seed;
    let categories = (0..instance.categories)
        .map(|c| {
            let (market, quality) = category_market(instance, c, oracle).map_err(|e| failure(c, e))?;
            let mut rng = stream(seed, &[purpose::POSTED_PRICE, c as u64]);
            let r = ppm(&market, rule, order, seed, &mut rng);
            Ok(CategoryOutcome::from_settlements(c, vec![r.settlement], quality.map(|q| q.quality_devices)))
        })
        .collect();
    Outcome { mechanism: MechanismKind::PostedPrice, seed, categories }
}

fn failure(category: usize, e: AuctionError) -> CategoryFailure {
    CategoryFailure { category, error: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dmr, AgentId};
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn units(side: Side, values: &[i64]) -> Vec<VirtualAgent<i64>> {
        values
            .iter()
            .enumerate()
            .map(|(i, &value)| VirtualAgent { owner: AgentId(i as u32 + 1), side, unit_index: 1, value, tiebreak: i as u64 })
            .collect()
    }

    fn values(vs: &[VirtualAgent<i64>]) -> Vec<i64> {
        vs.iter().map(|v| v.value).collect()
    }

    #[test]
    fn mcafee_budget_balanced_branch() {
        let s = mcafee_da(&units(Side::Buyer, &[10, 8, 3]), &units(Side::Seller, &[2, 4, 9])).unwrap();
        assert_eq!(values(&s.winning_buyers), vec![10, 8]);
        assert_eq!(values(&s.winning_sellers), vec![2, 4]);
        assert_eq!((s.buyer_price, s.seller_price, s.spread()), (6, 6, 0));
    }

    #[test]
    fn mcafee_no_trade() {
        assert_eq!(mcafee_da(&units(Side::Buyer, &[10]), &units(Side::Seller, &[12])), Err(BenchmarkError::NoTrade));
    }

    #[test]
    fn mcafee_without_next_pair_reduces() {
        let s = mcafee_da(&units(Side::Buyer, &[10, 8]), &units(Side::Seller, &[2, 4])).unwrap();
        assert_eq!(values(&s.winning_buyers), vec![10]);
        assert_eq!(values(&s.winning_sellers), vec![2]);
        assert_eq!((s.buyer_price, s.seller_price, s.spread()), (8, 4, 4));
    }

    #[test]
    fn mcafee_candidate_outside_interval_reduces() {
        // Third pair averages to 9.5 > b_2 = 8.
        let s = mcafee_da(&units(Side::Buyer, &[10, 8, 3]), &units(Side::Seller, &[2, 4, 16])).unwrap();
        assert_eq!(s.winning_buyers.len(), 1);
        assert_eq!((s.buyer_price, s.seller_price), (8, 4));

        let fb: Vec<VirtualAgent<f64>> = units(Side::Buyer, &[10, 8, 3]).iter().map(|v| VirtualAgent { value: v.value as f64, side: v.side, owner: v.owner, unit_index: 1, tiebreak: v.tiebreak }).collect();
        let fs: Vec<VirtualAgent<f64>> = units(Side::Seller, &[2, 4, 14]).iter().map(|v| VirtualAgent { value: v.value as f64, side: v.side, owner: v.owner, unit_index: 1, tiebreak: v.tiebreak }).collect();
        let s = mcafee_da(&fb, &fs).unwrap();
        assert_eq!((s.winning_buyers.len(), s.buyer_price), (1, 8.0));
    }

    fn agent(id: u32, side: Side, xs: &[i64]) -> Agent<i64> {
        Agent { id: AgentId(id), side, category: 0, valuation: validate_dmr(xs).unwrap() }
    }

    #[test]
    fn posted_price_above_all_bids_trades_nothing() {
        let agents = vec![agent(1, Side::Buyer, &[10, 5]), agent(2, Side::Seller, &[3])];
        let mut rng = StreamRng::seed_from_u64(0);
        let r = ppm(&agents, &PostedPriceRule::MidRange { low: 40, high: 60 }, AcceptanceOrder::Random, 0, &mut rng);
        assert_eq!(r.price, Some(50));
        assert!(r.settlement.winning_buyers.is_empty() && r.settlement.winning_sellers.is_empty());
    }

    #[test]
    fn mid_range_of_requester_bid_range() {
        let agents = vec![agent(1, Side::Buyer, &[20]), agent(2, Side::Seller, &[10, 3])];
        let mut rng = StreamRng::seed_from_u64(0);
        let r = ppm(&agents, &PostedPriceRule::MidRange { low: 8, high: 30 }, AcceptanceOrder::Random, 0, &mut rng);
        assert_eq!(r.price, Some(19));
        assert_eq!(r.settlement.winning_buyers.len(), 1);
    }

    #[test]
    fn posted_price_trades_min_of_demand_and_supply() {
        let agents = vec![
            agent(1, Side::Buyer, &[30, 25, 21]),
            agent(2, Side::Buyer, &[22]),
            agent(3, Side::Seller, &[15, 10]),
            agent(4, Side::Seller, &[12]),
        ];
        for order in [AcceptanceOrder::Random, AcceptanceOrder::ReportedPriority] {
            let mut rng = StreamRng::seed_from_u64(4);
            let r = ppm(&agents, &PostedPriceRule::MidRange { low: 18, high: 22 }, order, 0, &mut rng);
            assert_eq!(r.settlement.winning_buyers.len(), 3);
            assert_eq!(r.settlement.winning_sellers.len(), 3);
        }
        let mut rng = StreamRng::seed_from_u64(4);
        let r = ppm(&agents, &PostedPriceRule::MidRange { low: 18, high: 22 }, AcceptanceOrder::ReportedPriority, 0, &mut rng);
        assert_eq!(values(&r.settlement.winning_buyers), vec![30, 25, 22]);
    }

    #[test]
    fn sampled_median_keeps_sample_out_of_trade() {
        let agents: Vec<Agent<i64>> = (0..40)
            .map(|i| if i % 2 == 0 { agent(i, Side::Buyer, &[20 + i as i64]) } else { agent(i, Side::Seller, &[1 + i as i64]) })
            .collect();
        let mut rng = StreamRng::seed_from_u64(9);
        let r = ppm(&agents, &PostedPriceRule::SampledMedian, AcceptanceOrder::Random, 0, &mut rng);
        let sampled: BTreeSet<AgentId> = r.sampled.iter().copied().collect();
        assert!(!sampled.is_empty());
        let p = r.price.unwrap();
        let mut sampled_values: Vec<i64> = agents.iter().filter(|a| sampled.contains(&a.id)).map(|a| a.valuation.marginals()[0]).collect();
        sampled_values.sort();
        assert_eq!(p, sampled_values[(sampled_values.len() - 1) / 2]);
        for v in r.settlement.winning_buyers.iter().chain(&r.settlement.winning_sellers) {
            assert!(!sampled.contains(&v.owner));
        }
    }

    #[test]
    fn deviation_counts_and_identity() {
        let agents: Vec<Agent<i64>> = (0..30)
            .map(|i| if i < 10 { agent(i, Side::Buyer, &[100, 40]) } else { agent(i, Side::Seller, &[50, 20]) })
            .collect();
        let mut rng = StreamRng::seed_from_u64(2);
        let (same, none) = apply_deviation(&agents, 0.0, 1.25, &mut rng);
        assert_eq!(same, agents);
        assert!(none.is_empty());
        let (same, all) = apply_deviation(&agents, 1.0, 1.0, &mut rng);
        assert_eq!(same, agents);
        assert_eq!(all.len(), 30);
        let (reported, half) = apply_deviation(&agents, 0.5, 1.25, &mut rng);
        assert_eq!(half.len(), 15);
        for (a, r) in agents.iter().zip(&reported) {
            if !half.contains(&a.id) {
                assert_eq!(a, r);
                continue;
            }
            let expected: Vec<i64> = match a.side {
                Side::Buyer => vec![125, 50],
                Side::Seller => vec![40, 16],
            };
            assert_eq!(r.valuation.marginals(), &expected[..]);
        }
    }
}
