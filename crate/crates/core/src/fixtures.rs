//! Reference markets used by the unit tests and the `verify` suites.
//!
//! The two-arena market reproduces the reference scan trace of the worked
//! allocation example (ε = 3): left arena clears at 15, right arena at 12,
//! and the cross-evaluated quantities are (5, 3) on the left at 12 and
//! (3, 5) on the right at 15. The bid vectors themselves are not part of
//! the trace, so these are one choice of DMR vectors matching every
//! (price, demand, supply) point of that trace.

use std::collections::BTreeMap;

use crate::auction::{Arena, ArenaLabel};
use crate::model::{validate_dmr, Agent, AgentId, MarginalValuation, MarketInstance, MechanismParams};
use crate::money::Money;
use crate::quality::{FixedRanker, RankRound};

fn val<M: Money>(xs: &[i64]) -> MarginalValuation<M> {
    let ms: Vec<M> = xs.iter().map(|&x| M::from_units(x as u64)).collect();
    validate_dmr(&ms).expect("fixture valuations are DMR")
}

pub const EXAMPLE_EPSILON: u64 = 3;

pub fn example_left_arena<M: Money>() -> Arena<M> {
    Arena::new(
        ArenaLabel::Left,
        vec![Agent::buyer(1, 0, val(&[20, 18])), Agent::buyer(2, 0, val(&[17, 14])), Agent::buyer(3, 0, val(&[16, 8]))],
        vec![Agent::seller(11, 0, val(&[11, 5])), Agent::seller(12, 0, val(&[13, 10])), Agent::seller(13, 0, val(&[25]))],
    )
}

pub fn example_right_arena<M: Money>() -> Arena<M> {
    Arena::new(
        ArenaLabel::Right,
        vec![Agent::buyer(4, 0, val(&[20, 18])), Agent::buyer(5, 0, val(&[16, 10]))],
        vec![Agent::seller(14, 0, val(&[13, 4])), Agent::seller(15, 0, val(&[12, 7])), Agent::seller(16, 0, val(&[10]))],
    )
}

/// Both arenas as one single-category instance (quality filter off).
pub fn example_instance<M: Money>(seed: u64) -> MarketInstance<M> {
    let l = example_left_arena::<M>();
    let r = example_right_arena::<M>();
    let agents = l.buyers.into_iter().chain(l.sellers).chain(r.buyers).chain(r.sellers).collect();
    MarketInstance::new(1, agents, MechanismParams::new(M::from_units(EXAMPLE_EPSILON), seed))
        .expect("fixture instance is valid")
}

/// The three grading rounds of the nine-device quality example.
///
/// Round 2 and 3 rank lists reproduce the reference totals (8/6/4 and
/// 6/6/6). Round 1's reference totals (8/7/7) sum to 22, more than the
/// 18 points three graders can hand out over three candidates, so only
/// per-candidate placements are reproducible for it (see
/// [`example_round_one_placements`]).
pub fn example_quality_rounds() -> Vec<RankRound> {
    let ids = |xs: &[u32]| xs.iter().map(|&x| AgentId(x)).collect::<Vec<_>>();
    vec![
        RankRound {
            graders: ids(&[2, 4, 6]),
            candidates: ids(&[1, 3, 5]),
            rankings: vec![ids(&[3, 1, 5]), ids(&[1, 3, 5]), ids(&[3, 5, 1])],
        },
        RankRound {
            graders: ids(&[1, 7, 8]),
            candidates: ids(&[2, 4, 6]),
            rankings: vec![ids(&[2, 4, 6]), ids(&[4, 2, 6]), ids(&[2, 6, 4])],
        },
        RankRound {
            graders: ids(&[5, 2, 3]),
            candidates: ids(&[7, 8, 9]),
            rankings: vec![ids(&[8, 7, 9]), ids(&[9, 8, 7]), ids(&[7, 9, 8])],
        },
    ]
}

/// Reference placements (1-based) behind the round-one totals.
pub fn example_round_one_placements() -> BTreeMap<AgentId, Vec<usize>> {
    [(3, vec![1, 1, 2]), (1, vec![2, 2, 1]), (5, vec![2, 2, 1])].into_iter().map(|(id, p)| (AgentId(id), p)).collect()
}

/// Replays every grader's submitted order from [`example_quality_rounds`].
pub fn example_ranker() -> FixedRanker {
    let mut f = FixedRanker::default();
    for round in example_quality_rounds() {
        for (g, r) in round.graders.iter().zip(round.rankings) {
            f.orders.entry(*g).or_default().extend(r);
        }
    }
    f
}
