//! Self-checks behind the `verify` command: the worked reference examples
//! and randomized invariant suites.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::auction::{clear_arenas, find_equilibrium_price, run_quad, split_market, Arena, ArenaLabel};
use crate::benchmarks::{mcafee_da, run_mcafee, run_ppm};
use crate::experiment::{generate_instance, run_experiment, ExperimentConfig, Mechanism};
use crate::fixtures::{
    example_left_arena, example_quality_rounds, example_right_arena, example_round_one_placements, EXAMPLE_EPSILON,
};
use crate::metrics::{collect_metrics, expected_tasks, tail_bound};
use crate::model::{demand_at_price, supply_at_price, validate_dmr, AgentId, Side, Venue, VirtualAgent};
use crate::quality::{borda_points, iot_qdbc, placement_points, synth_rank_oracle};
use crate::rng::{stream, StreamRng};
use crate::Cents;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Examples,
    Properties,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Examples => "examples",
            Suite::Properties => "properties",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

fn eq_check<T: PartialEq + fmt::Debug>(name: &'static str, got: T, want: T) -> Check {
    let passed = got == want;
    check(name, passed, if passed { format!("{got:?}") } else { format!("got {got:?}, expected {want:?}") })
}

pub fn run_suite(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Examples => examples(),
        Suite::Properties => properties(PropertyBudget::default()),
    }
}

fn examples() -> Vec<Check> {
    let mut out = Vec::new();
    let v = validate_dmr(&[5i64, 4, 1]).expect("valid");
    out.push(eq_check("demand of [5,4,1] at price 3", demand_at_price(&v, 3), 2));

    let placements = example_round_one_placements();
    let round_one: Vec<u64> = [3, 1, 5].iter().map(|&id| placement_points(3, &placements[&AgentId(id)])).collect();
    out.push(eq_check("round 1 Borda totals", round_one, vec![8, 7, 7]));
    let rounds = example_quality_rounds();
    for (name, round, want) in [("round 2 Borda totals", &rounds[1], vec![8, 6, 4]), ("round 3 Borda totals", &rounds[2], vec![6, 6, 6])]
    {
        let got = borda_points(round, 3).map(|p| {
            let mut v: Vec<u64> = p.values().copied().collect();
            v.sort_by(|a, b| b.cmp(a));
            v
        });
        out.push(eq_check(name, got.ok(), Some(want)));
    }

    let eps = EXAMPLE_EPSILON as i64;
    let left = example_left_arena::<i64>();
    let right = example_right_arena::<i64>();
    let pl = find_equilibrium_price(&left, eps).map(|r| r.price);
    let pr = find_equilibrium_price(&right, eps).map(|r| r.price);
    out.push(eq_check("left arena equilibrium price", pl, Ok(15)));
    out.push(eq_check("right arena equilibrium price", pr, Ok(12)));
    match clear_arenas(0, left, right, eps, 0, None) {
        Ok(run) => {
            out.push(eq_check("left arena at right price", (run.left.cross.demand, run.left.cross.supply), (5, 3)));
            out.push(eq_check("right arena at left price", (run.right.cross.demand, run.right.cross.supply), (3, 5)));
            let price = |venue| run.outcome.settlement(venue).map(|s| (s.buyer_price, s.seller_price));
            out.push(eq_check("left arena trade price", price(Venue::Left), Some((12, 12))));
            out.push(eq_check("right arena trade price", price(Venue::Right), Some((15, 15))));
            let l = &run.left.settlement;
            let r = &run.right.settlement;
            out.push(eq_check(
                "trade balance in the example",
                (l.winning_buyers.len(), l.winning_sellers.len(), r.winning_buyers.len(), r.winning_sellers.len()),
                (3, 3, 3, 3),
            ));
        }
        Err(e) => out.push(check("example arenas clear", false, e.to_string())),
    }

    out.push(eq_check("expected tasks for 100", expected_tasks(100), Ok(50.0)));
    let tb = tail_bound(1000).unwrap_or(f64::NAN);
    out.push(check("tail bound for 1000", (tb - 10.0 / 27.0).abs() < 1e-12, format!("{tb}")));

    let unit = |side, vals: &[i64]| -> Vec<VirtualAgent<i64>> {
        vals.iter()
            .enumerate()
            .map(|(i, &value)| VirtualAgent { owner: AgentId(i as u32), side, unit_index: 1, value, tiebreak: i as u64 })
            .collect()
    };
    let m = mcafee_da(&unit(Side::Buyer, &[10, 8, 3]), &unit(Side::Seller, &[2, 4, 9]));
    out.push(eq_check(
        "McAfee example trades two units at 6",
        m.map(|s| (s.winning_buyers.len(), s.buyer_price, s.seller_price)).ok(),
        Some((2, 6, 6)),
    ));
    out
}

/// Sizes of the randomized property suites.
#[derive(Debug, Clone, Copy)]
pub struct PropertyBudget {
    pub valuations: usize,
    pub quality_runs: usize,
    pub arenas: usize,
    pub instances: usize,
    pub seed: u64,
}

impl Default for PropertyBudget {
    fn default() -> Self {
        Self { valuations: 2000, quality_runs: 300, arenas: 1000, instances: 40, seed: 0x5eed }
    }
}

fn random_marginals<R: Rng>(rng: &mut R) -> Vec<Cents> {
    let q = rng.random_range(1..=6);
    let mut ms: Vec<Cents> = (0..q).map(|_| rng.random_range(1..=60)).collect();
    ms.sort_by(|a, b| b.cmp(a));
    ms
}

fn random_arena<R: Rng>(rng: &mut R) -> Arena<Cents> {
    let mut buyers = Vec::new();
    let mut sellers = Vec::new();
    for id in 0..rng.random_range(1..=8u32) {
        let v = validate_dmr(&random_marginals(rng)).expect("sorted");
        if rng.random_bool(0.5) {
            buyers.push(crate::model::Agent::buyer(id, 0, v));
        } else {
            sellers.push(crate::model::Agent::seller(id, 0, v));
        }
    }
    Arena::new(ArenaLabel::Left, buyers, sellers)
}

pub fn properties(budget: PropertyBudget) -> Vec<Check> {
    let mut rng: StreamRng = stream(budget.seed, &[]);
    let mut out = Vec::new();

    let mut bad = None;
    for _ in 0..budget.valuations {
        let v = validate_dmr(&random_marginals(&mut rng)).expect("sorted");
        for p in 0..=61 {
            if demand_at_price(&v, p + 1) > demand_at_price(&v, p) || supply_at_price(&v, p + 1) < supply_at_price(&v, p) {
                bad = Some(format!("{:?} at {p}", v.marginals()));
            }
        }
    }
    out.push(check(
        "DMR monotonicity of demand and supply",
        bad.is_none(),
        bad.unwrap_or_else(|| format!("{} valuations", budget.valuations)),
    ));

    let mut bad = None;
    let mut rounds = 0;
    for _ in 0..budget.quality_runs {
        let n = rng.random_range(1..=40u32);
        let gamma = rng.random_range(1..=5);
        let beta = rng.random_range(1..=5);
        let devices: Vec<AgentId> = (1..=n).map(AgentId).collect();
        let quality: BTreeMap<AgentId, f64> = devices.iter().map(|&d| (d, rng.random())).collect();
        let oracle = synth_rank_oracle(quality, 0.3);
        match iot_qdbc(&devices, &oracle, gamma, beta, &mut rng) {
            Ok(r) => {
                for (round, points) in r.profile.rounds.iter().zip(&r.points) {
                    rounds += 1;
                    let b = round.candidates.len() as u64;
                    let want = round.graders.len() as u64 * b * (b + 1) / 2;
                    let full = round.graders.len() == gamma && round.candidates.len() == beta;
                    let formula = (gamma * beta * (beta + 1) / 2) as u64;
                    if points.values().sum::<u64>() != want || (full && want != formula) {
                        bad = Some(format!("n={n} gamma={gamma} beta={beta}: {points:?}"));
                    }
                }
                if n as usize > beta && r.profile.rounds.len() != (n as usize).div_ceil(beta) {
                    bad = Some(format!("n={n} beta={beta}: {} rounds", r.profile.rounds.len()));
                }
            }
            Err(e) => bad = Some(e.to_string()),
        }
    }
    out.push(check("Borda point conservation", bad.is_none(), bad.unwrap_or_else(|| format!("{rounds} rounds"))));

    let mut bad_cross = None;
    let mut bad_balance = None;
    for _ in 0..budget.arenas {
        let left = random_arena(&mut rng);
        let right = random_arena(&mut rng);
        let eps = rng.random_range(1..=5);
        for arena in [&left, &right] {
            if let Ok(r) = find_equilibrium_price(arena, eps) {
                let d = |p| crate::auction::cross_evaluate(arena, p);
                let at = d(r.price);
                let ok_at = at.demand <= at.supply;
                let ok_before = r.price <= eps || {
                    let b = d(r.price - eps);
                    b.demand > b.supply
                };
                if !(ok_at && ok_before) || (r.converged != (at.demand == at.supply)) {
                    bad_cross = Some(format!("price {} step {eps}", r.price));
                }
            }
        }
        let seed = rng.random();
        if let Ok(run) = clear_arenas(0, left, right, eps, seed, None) {
            for s in &run.outcome.settlements {
                if s.winning_buyers.len() != s.winning_sellers.len() {
                    bad_balance = Some(format!("{:?}: {} vs {}", s.venue, s.winning_buyers.len(), s.winning_sellers.len()));
                }
            }
        }
    }
    out.push(check("crossing property", bad_cross.is_none(), bad_cross.unwrap_or_else(|| format!("{} arena pairs", budget.arenas))));
    out.push(check("trade balance", bad_balance.is_none(), bad_balance.unwrap_or_else(|| format!("{} arena pairs", budget.arenas))));

    let config = property_config();
    let mut bad = None;
    for i in 0..budget.instances {
        let g = match generate_instance(&config, budget.seed ^ i as u64) {
            Ok(g) => g,
            Err(e) => {
                bad = Some(e.to_string());
                break;
            }
        };
        let oracle = g.oracle(config.quality_noise_sd);
        let rule = config.posted_price_rule();
        for outcome in [
            run_quad(&g.instance, &oracle),
            run_mcafee(&g.instance, &oracle),
            run_ppm(&g.instance, &oracle, &rule, config.benchmark.acceptance_order),
        ] {
            let m = collect_metrics(&outcome, &g.instance);
            if let Some((id, u)) = m.agent_utilities.iter().find(|(_, &u)| u < 0) {
                bad = Some(format!("{:?}: agent {id} utility {u}", outcome.mechanism));
            }
            if outcome.completed().any(|c| c.platform_revenue < 0) {
                bad = Some(format!("{:?}: negative platform revenue", outcome.mechanism));
            }
            let paid: Cents = outcome.completed().flat_map(|c| c.payments.values()).sum();
            if paid != outcome.platform_revenue() {
                bad = Some(format!("{:?}: payments {paid} vs revenue {}", outcome.mechanism, outcome.platform_revenue()));
            }
        }
    }
    out.push(check(
        "individual rationality, budget balance and accounting",
        bad.is_none(),
        bad.unwrap_or_else(|| format!("{} instances x 3 mechanisms", budget.instances)),
    ));

    let g = generate_instance(&config, budget.seed).expect("property config is valid");
    let oracle = g.oracle(config.quality_noise_sd);
    let a = serde_json::to_vec(&run_quad(&g.instance, &oracle)).expect("serializes");
    let b = serde_json::to_vec(&run_quad(&g.instance, &oracle)).expect("serializes");
    let mut split_a = stream(budget.seed, &[1]);
    let mut split_b = stream(budget.seed, &[1]);
    let same_split = split_market(&g.instance.agents, &mut split_a) == split_market(&g.instance.agents, &mut split_b);
    let csv_a = csv_bytes(&config);
    let csv_b = csv_bytes(&config);
    out.push(check(
        "byte-identical reruns",
        a == b && same_split && csv_a.is_some() && csv_a == csv_b,
        format!("outcome {} bytes, csv {} bytes", a.len(), csv_a.as_ref().map_or(0, |c| c.len())),
    ));
    out
}

fn property_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(include_str!("../../../configs/population_rand.toml")).expect("shipped config parses");
    c.trials = 2;
    c.quality_filter = true;
    c
}

fn csv_bytes(config: &ExperimentConfig) -> Option<Vec<u8>> {
    let mut c = config.clone();
    c.mechanism = Mechanism::PpmD;
    let result = run_experiment(&c).ok()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for rows in result.csv_rows().into_values() {
        for r in rows {
            w.serialize(r).ok()?;
        }
    }
    w.into_inner().ok()
}
