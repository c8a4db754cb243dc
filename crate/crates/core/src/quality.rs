//! Peer-graded selection of quality devices by Borda count.
//!
//! Each round samples `γ` graders from the full device set and up to `β`
//! not-yet-ranked candidates (excluding the graders). Every grader submits
//! a full ranking of the candidates; a candidate placed at position `ℓ`
//! (0-based) earns `β − ℓ` points from that grader. The round's top scorer
//! joins the quality set and all of the round's candidates leave the
//! unranked pool. The loop ends once every device has been a candidate.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AgentId;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum QualityError {
    #[error("grader {grader} submitted a ranking that is not a permutation of the candidates")]
    MalformedRanking { grader: AgentId },
    #[error("no devices to rank")]
    InsufficientDevices,
    #[error("gamma and beta must be at least 1")]
    InvalidParameter,
}

/// One grading round: `rankings[i]` is the order submitted by `graders[i]`,
/// best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRound {
    pub graders: Vec<AgentId>,
    pub candidates: Vec<AgentId>,
    pub rankings: Vec<Vec<AgentId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankProfile {
    pub rounds: Vec<RankRound>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityResult {
    /// One selected device per round, in round order.
    pub quality_devices: Vec<AgentId>,
    pub points: Vec<BTreeMap<AgentId, u64>>,
    pub profile: RankProfile,
    /// Devices admitted without any grading (single-device pools).
    pub admitted_unranked: Vec<AgentId>,
}

/// Source of grader rankings.
pub trait RankOracle {
    /// Full ranking of `candidates` by `grader`, best first.
    fn rank(&self, grader: AgentId, candidates: &[AgentId], rng: &mut dyn RngCore) -> Vec<AgentId>;
}

/// Points for a candidate given its 1-based placements across graders.
pub fn placement_points(beta: usize, placements: &[usize]) -> u64 {
    placements.iter().map(|&pos| (beta + 1).saturating_sub(pos) as u64).sum()
}

/// Borda points of every candidate in `round`.
pub fn borda_points(round: &RankRound, beta: usize) -> Result<BTreeMap<AgentId, u64>, QualityError> {
    let candidates: BTreeSet<AgentId> = round.candidates.iter().copied().collect();
    let mut points: BTreeMap<AgentId, u64> = candidates.iter().map(|&c| (c, 0)).collect();
    for (grader, ranking) in round.graders.iter().zip(&round.rankings) {
        let listed: BTreeSet<AgentId> = ranking.iter().copied().collect();
        if ranking.len() != beta || listed.len() != ranking.len() || listed != candidates {
            return Err(QualityError::MalformedRanking { grader: *grader });
        }
        for (place, c) in ranking.iter().enumerate() {
            *points.get_mut(c).expect("candidate checked above") += (beta - place) as u64;
        }
    }
    if round.rankings.len() != round.graders.len() {
        let grader = round.graders.get(round.rankings.len()).copied().unwrap_or(AgentId(u32::MAX));
        return Err(QualityError::MalformedRanking { grader });
    }
    Ok(points)
}

fn sample_from<R: Rng + ?Sized>(pool: &BTreeSet<AgentId>, amount: usize, rng: &mut R) -> Vec<AgentId> {
    let mut picked = pool.iter().copied().choose_multiple(rng, amount);
    picked.sort();
    picked
}

pub fn iot_qdbc<R: Rng>(
    devices: &[AgentId],
    oracle: &dyn RankOracle,
    gamma: usize,
    beta: usize,
    rng: &mut R,
) -> Result<QualityResult, QualityError> {
    if gamma == 0 || beta == 0 {
        return Err(QualityError::InvalidParameter);
    }
    let all: BTreeSet<AgentId> = devices.iter().copied().collect();
    if all.is_empty() {
        return Err(QualityError::InsufficientDevices);
    }
    let mut unranked = all.clone();
    let mut result = QualityResult {
        quality_devices: Vec::new(),
        points: Vec::new(),
        profile: RankProfile::default(),
        admitted_unranked: Vec::new(),
    };

    if all.len() == 1 {
        let sole = *all.iter().next().unwrap();
        log::warn!("single device {sole} admitted to the quality pool without grading");
        result.quality_devices.push(sole);
        result.admitted_unranked.push(sole);
        return Ok(result);
    }

    while !unranked.is_empty() {
        let target = beta.min(unranked.len());
        let mut graders = sample_from(&all, gamma.min(all.len()), rng);
        let pool: BTreeSet<AgentId> = unranked.difference(&graders.iter().copied().collect()).copied().collect();
        let candidates = if pool.len() >= target {
            sample_from(&pool, target, rng)
        } else {
            // Graders ate into a short pool: fix the candidates first and
            // draw graders from everyone else.
            let mut candidates = sample_from(&unranked, target, rng);
            if candidates.len() == all.len() {
                candidates.pop();
            }
            let chosen: BTreeSet<AgentId> = candidates.iter().copied().collect();
            let eligible: BTreeSet<AgentId> = all.difference(&chosen).copied().collect();
            graders = sample_from(&eligible, gamma.min(eligible.len()), rng);
            candidates
        };
        let rankings: Vec<Vec<AgentId>> = graders.iter().map(|&g| oracle.rank(g, &candidates, rng)).collect();
        let round = RankRound { graders, candidates, rankings };
        let points = borda_points(&round, round.candidates.len())?;

        let best = points.values().copied().max().unwrap_or(0);
        let leaders: Vec<AgentId> = points.iter().filter(|(_, &p)| p == best).map(|(&id, _)| id).collect();
        let winner = leaders[rng.random_range(0..leaders.len())];

        for c in &round.candidates {
            unranked.remove(c);
        }
        result.quality_devices.push(winner);
        result.points.push(points);
        result.profile.rounds.push(round);
    }
    Ok(result)
}

/// Simulated graders: each ranks candidates by true quality plus independent
/// Gaussian noise. Exact ties fall to a random key.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRanker {
    pub true_quality: BTreeMap<AgentId, f64>,
    pub noise_sd: f64,
}

pub fn synth_rank_oracle(true_quality: BTreeMap<AgentId, f64>, noise_sd: f64) -> SyntheticRanker {
    SyntheticRanker { true_quality, noise_sd: noise_sd.max(0.0) }
}

impl RankOracle for SyntheticRanker {
    fn rank(&self, _grader: AgentId, candidates: &[AgentId], rng: &mut dyn RngCore) -> Vec<AgentId> {
        let noise = Normal::new(0.0, self.noise_sd).ok();
        let mut scored: Vec<(f64, u64, AgentId)> = candidates
            .iter()
            .map(|&c| {
                let base = self.true_quality.get(&c).copied().unwrap_or(0.0);
                let jitter = match (&noise, self.noise_sd > 0.0) {
                    (Some(n), true) => n.sample(rng),
                    _ => 0.0,
                };
                (base + jitter, rng.next_u64(), c)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, _, c)| c).collect()
    }
}

/// Rankings fixed in advance, keyed by grader. Used for replaying recorded
/// profiles.
#[derive(Debug, Clone, Default)]
pub struct FixedRanker {
    pub orders: BTreeMap<AgentId, Vec<AgentId>>,
}

impl RankOracle for FixedRanker {
    fn rank(&self, grader: AgentId, candidates: &[AgentId], _rng: &mut dyn RngCore) -> Vec<AgentId> {
        let wanted: BTreeSet<AgentId> = candidates.iter().copied().collect();
        let mut order: Vec<AgentId> = self
            .orders
            .get(&grader)
            .map(|o| o.iter().copied().filter(|c| wanted.contains(c)).collect())
            .unwrap_or_default();
        for c in candidates {
            if !order.contains(c) {
                order.push(*c);
            }
        }
        order
    }
}
