use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;
use proptest::prelude::*;
use quad_core::auction::{find_equilibrium_exact, find_equilibrium_price, run_quad, Arena, ArenaLabel};
use quad_core::benchmarks::{run_mcafee, run_ppm, AcceptanceOrder, PostedPriceRule};
use quad_core::metrics::collect_metrics;
use quad_core::model::{
    buyer_utility, demand_at_price, seller_utility, supply_at_price, validate_dmr, Agent, AgentId, MarginalValuation,
    MarketInstance, MechanismParams, Outcome, Side,
};
use quad_core::quality::{iot_qdbc, synth_rank_oracle};
use quad_core::rng::stream;
use quad_core::Money;

fn marginals(max_len: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(1i64..=60, 1..=max_len).prop_map(|mut v| {
        v.sort_by(|a, b| b.cmp(a));
        v
    })
}

fn lift<M: Money>(xs: &[i64]) -> MarginalValuation<M> {
    validate_dmr(&xs.iter().map(|&x| M::from_units(x as u64)).collect::<Vec<_>>()).unwrap()
}

/// Buyers and sellers as raw marginal vectors, spread over `categories`,
/// with at least one of each side per category.
fn market(categories: usize) -> impl Strategy<Value = Vec<(bool, usize, Vec<i64>)>> {
    (
        prop::collection::vec((marginals(4), marginals(4)), categories),
        prop::collection::vec((any::<bool>(), 0..categories, marginals(4)), 0..20),
    )
        .prop_map(|(base, extra)| {
            let mut all: Vec<_> =
                base.into_iter().enumerate().flat_map(|(c, (b, s))| [(true, c, b), (false, c, s)]).collect();
            all.extend(extra);
            all
        })
}

fn instance<M: Money>(agents: &[(bool, usize, Vec<i64>)], categories: usize, seed: u64, filter: bool) -> MarketInstance<M> {
    let agents = agents
        .iter()
        .enumerate()
        .map(|(i, (buyer, c, ms))| {
            if *buyer {
                Agent::buyer(i as u32, *c, lift(ms))
            } else {
                Agent::seller(i as u32, *c, lift(ms))
            }
        })
        .collect();
    let mut params = MechanismParams::new(M::from_units(1), seed);
    params.quality_filter = filter;
    MarketInstance::new(categories, agents, params).unwrap()
}

fn oracle(n: usize) -> quad_core::quality::SyntheticRanker {
    synth_rank_oracle((0..n as u32).map(|i| (AgentId(i), (i % 7) as f64 / 7.0)).collect(), 0.1)
}

fn assert_ir_wbb<M: Money + std::fmt::Debug>(outcome: &Outcome<M>, truth: &MarketInstance<M>) {
    let m = collect_metrics(outcome, truth);
    for (id, u) in &m.agent_utilities {
        assert!(*u >= M::zero(), "agent {id} utility {u:?}");
    }
    for c in outcome.completed() {
        assert!(c.platform_revenue >= M::zero(), "category {} revenue {:?}", c.category, c.platform_revenue);
        let net: M = c.payments.values().copied().sum();
        assert_eq!(net, c.platform_revenue, "transfers must add up to platform revenue");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn demand_and_supply_are_monotone(ms in marginals(8), p in 0i64..70, q in 0i64..70) {
        let v = lift::<i64>(&ms);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(demand_at_price(&v, lo) >= demand_at_price(&v, hi));
        prop_assert!(supply_at_price(&v, lo) <= supply_at_price(&v, hi));
    }

    #[test]
    fn demand_maximizes_buyer_utility(ms in marginals(8), p in 0i64..70) {
        let v = lift::<i64>(&ms);
        let d = demand_at_price(&v, p);
        let best = buyer_utility(&v, d, p).unwrap();
        for f in 0..=v.capacity() {
            prop_assert!(buyer_utility(&v, f, p).unwrap() <= best);
        }
        let s = supply_at_price(&v, p);
        let best = seller_utility(&v, s, p).unwrap();
        for f in 0..=v.capacity() {
            prop_assert!(seller_utility(&v, f, p).unwrap() <= best);
        }
    }

    #[test]
    fn quad_is_ir_and_budget_balanced(agents in market(3), seed in any::<u64>(), filter in any::<bool>()) {
        let inst = instance::<i64>(&agents, 3, seed, filter);
        let outcome = run_quad(&inst, &oracle(agents.len()));
        assert_ir_wbb(&outcome, &inst);
        // Each venue trades as many units as it buys.
        for c in outcome.completed() {
            for s in &c.settlements {
                prop_assert_eq!(s.winning_buyers.len(), s.winning_sellers.len());
                prop_assert_eq!(s.buyer_price, s.seller_price);
            }
        }
    }

    #[test]
    fn benchmarks_are_ir_and_budget_balanced(agents in market(2), seed in any::<u64>()) {
        let inst = instance::<i64>(&agents, 2, seed, false);
        let o = oracle(agents.len());
        assert_ir_wbb(&run_mcafee(&inst, &o), &inst);
        assert_ir_wbb(&run_ppm(&inst, &o, &PostedPriceRule::SampledMedian, AcceptanceOrder::Random), &inst);
        assert_ir_wbb(&run_ppm(&inst, &o, &PostedPriceRule::MidRange { low: 5, high: 40 }, AcceptanceOrder::ReportedPriority), &inst);
    }

    #[test]
    fn cents_and_rationals_agree(agents in market(2), seed in any::<u64>()) {
        let a = run_quad(&instance::<i64>(&agents, 2, seed, false), &oracle(agents.len()));
        let b = run_quad(&instance::<Rational64>(&agents, 2, seed, false), &oracle(agents.len()));
        let to_r = |x: i64| Rational64::from_integer(x);
        prop_assert_eq!(to_r(a.platform_revenue()), b.platform_revenue());
        for i in 0..agents.len() as u32 {
            prop_assert_eq!(a.units_of(AgentId(i)), b.units_of(AgentId(i)));
            prop_assert_eq!(to_r(a.payment_of(AgentId(i))), b.payment_of(AgentId(i)));
        }
    }

    #[test]
    fn exact_finder_matches_scan(
        buyers in prop::collection::vec(marginals(4), 0..6),
        sellers in prop::collection::vec(marginals(4), 1..6),
        tenths in 1i64..10,
    ) {
        // Integer values sit at least 1 apart; any step below 1 is finer.
        let arena = Arena::new(
            ArenaLabel::Left,
            buyers.iter().enumerate().map(|(i, ms)| Agent::buyer(i as u32, 0, lift(ms))).collect(),
            sellers.iter().enumerate().map(|(i, ms)| Agent::seller(100 + i as u32, 0, lift(ms))).collect(),
        );
        let step = Rational64::new(tenths, 10);
        let scan = find_equilibrium_price(&arena, step).unwrap();
        let exact = find_equilibrium_exact(&arena).unwrap();
        prop_assert_eq!(exact.grid_price(step), scan.price);
        prop_assert!(scan.demand() <= scan.supply());
    }

    #[test]
    fn borda_rounds_conserve_points(n in 1usize..40, gamma in 1usize..5, beta in 1usize..5, seed in any::<u64>()) {
        let devices: Vec<AgentId> = (0..n as u32).map(AgentId).collect();
        let mut rng = stream(seed, &[]);
        let r = iot_qdbc(&devices, &oracle(n), gamma, beta, &mut rng).unwrap();
        // A lone device skips grading; a pool no larger than one round keeps
        // one device back so someone is left to grade.
        let rounds = match n {
            1 => 0,
            _ if n <= beta => 2,
            _ => n.div_ceil(beta),
        };
        prop_assert_eq!(r.profile.rounds.len(), rounds);
        let mut admitted = BTreeSet::new();
        for (round, points) in r.profile.rounds.iter().zip(&r.points) {
            let total: u64 = points.values().sum();
            let per_grader = (round.candidates.len() * (round.candidates.len() + 1) / 2) as u64;
            prop_assert_eq!(total, round.graders.len() as u64 * per_grader);
            prop_assert!(round.graders.iter().all(|g| !round.candidates.contains(g)));
            admitted.extend(round.candidates.iter().copied());
        }
        // Every device is a candidate or admitted without grading.
        admitted.extend(r.admitted_unranked.iter().copied());
        prop_assert_eq!(admitted.len(), n);
        let chosen: BTreeMap<AgentId, ()> = r.quality_devices.iter().map(|&d| (d, ())).collect();
        prop_assert_eq!(chosen.len(), r.quality_devices.len());
    }
}

#[test]
fn seller_side_mirrors_buyer_side() {
    let v = lift::<i64>(&[9, 6, 2]);
    assert_eq!(supply_at_price(&v, 7), 2);
    assert_eq!(demand_at_price(&v, 7), 1);
    assert_eq!(Side::Buyer.to_string(), "buyer");
}
