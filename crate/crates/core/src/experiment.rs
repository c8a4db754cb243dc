//! Simulation harness: TOML configuration, random instance generation and
//! multi-trial runs written as CSV.
//!
//! Money in configuration files is in dollars; the harness works in
//! [`Cents`]-style integer units with `money_scale` units per dollar.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::auction::run_quad;
use crate::benchmarks::{apply_deviation, run_mcafee, run_ppm, AcceptanceOrder, PostedPriceRule};
use crate::metrics::{collect_metrics, execute_tasks, RunMetrics, TaskModel};
use crate::model::{Agent, AgentId, MarginalValuation, MarketInstance, MechanismParams, Outcome, Side};
use crate::quality::{synth_rank_oracle, SyntheticRanker};
use crate::rng::{derive_seed, purpose, stream, StreamRng};
use crate::Cents;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("generated instance rejected: {0}")]
    Instance(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueDistribution {
    RanD,
    NanD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Quad,
    McAfee,
    Ppm,
    PpmD,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::Quad => "quad",
            Mechanism::McAfee => "mcafee",
            Mechanism::Ppm => "ppm",
            Mechanism::PpmD => "ppm-d",
        }
    }
}

/// How an agent's total value is split into per-unit marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Uniform random cut points, spacings sorted descending.
    #[default]
    SortedUniformSpacings,
    /// Equal shares; leftover units go to the first marginals.
    EqualShare,
}

/// Per-side value source: a uniform range (RanD) and/or a normal law (NanD),
/// in dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSpec {
    #[serde(default)]
    pub range: Option<[f64; 2]>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum PostedPriceSpec {
    MidRange { low: f64, high: f64 },
    SampledMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    #[serde(default = "default_fraction")]
    pub deviation_fraction: f64,
    #[serde(default = "default_factor")]
    pub deviation_factor: f64,
    #[serde(default = "default_posted")]
    pub posted_price: PostedPriceSpec,
    #[serde(default)]
    pub acceptance_order: AcceptanceOrder,
}

fn default_fraction() -> f64 {
    0.5
}
fn default_factor() -> f64 {
    1.25
}
fn default_posted() -> PostedPriceSpec {
    PostedPriceSpec::SampledMedian
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            deviation_fraction: default_fraction(),
            deviation_factor: default_factor(),
            posted_price: default_posted(),
            acceptance_order: AcceptanceOrder::default(),
        }
    }
}

fn default_scale() -> u32 {
    100
}
fn default_three() -> usize {
    3
}
fn default_noise() -> f64 {
    0.1
}
fn default_trials() -> usize {
    1
}

/// Experiment description. Field names follow the notation of the
/// simulation table: `m_i`/`n_i` requesters/devices per category,
/// `nu_r`/`nu_I` value laws, `Q_r`/`Q_I` unit ranges.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub k: usize,
    pub m_i: Vec<usize>,
    pub n_i: Vec<usize>,
    pub distribution: ValueDistribution,
    pub nu_r: ValueSpec,
    pub nu_I: ValueSpec,
    pub Q_r: [usize; 2],
    pub Q_I: [usize; 2],
    /// Price step in dollars.
    pub epsilon: f64,
    #[serde(default = "default_three")]
    pub gamma: usize,
    #[serde(default = "default_three")]
    pub beta: usize,
    #[serde(default)]
    pub quality_filter: bool,
    /// Grader noise on the latent device quality (uniform on [0, 1]).
    #[serde(default = "default_noise")]
    pub quality_noise_sd: f64,
    #[serde(default)]
    pub split_rule: SplitRule,
    #[serde(default)]
    pub task_model: TaskModel,
    /// Money units per dollar.
    #[serde(default = "default_scale")]
    pub money_scale: u32,
    pub mechanism: Mechanism,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(invalid("k", "at least one category"));
        }
        for (name, v) in [("m_i", &self.m_i), ("n_i", &self.n_i)] {
            if v.len() != self.k {
                return Err(invalid(name, format!("expected {} entries, found {}", self.k, v.len())));
            }
            if let Some(i) = v.iter().position(|&x| x == 0) {
                return Err(invalid(&format!("{name}[{i}]"), "must be positive"));
            }
        }
        for (name, spec) in [("nu_r", &self.nu_r), ("nu_I", &self.nu_I)] {
            match self.distribution {
                ValueDistribution::RanD => match spec.range {
                    Some([lo, hi]) if lo > 0.0 && lo <= hi && hi.is_finite() => {}
                    Some(_) => return Err(invalid(&format!("{name}.range"), "need 0 < low <= high")),
                    None => return Err(invalid(&format!("{name}.range"), "required for RanD")),
                },
                ValueDistribution::NanD => {
                    if !spec.mu.is_some_and(|m| m.is_finite()) {
                        return Err(invalid(&format!("{name}.mu"), "required for NanD"));
                    }
                    if !spec.sigma.is_some_and(|s| s.is_finite() && s > 0.0) {
                        return Err(invalid(&format!("{name}.sigma"), "must be positive for NanD"));
                    }
                }
            }
        }
        for (name, [lo, hi]) in [("Q_r", self.Q_r), ("Q_I", self.Q_I)] {
            if lo == 0 || lo > hi {
                return Err(invalid(name, "need 1 <= low <= high"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        if self.money_scale == 0 {
            return Err(invalid("money_scale", "must be positive"));
        }
        if self.to_money(self.epsilon) < 1 {
            return Err(invalid("epsilon", "smaller than one money unit"));
        }
        if self.gamma == 0 {
            return Err(invalid("gamma", "must be at least 1"));
        }
        if self.beta == 0 {
            return Err(invalid("beta", "must be at least 1"));
        }
        if !(self.quality_noise_sd.is_finite() && self.quality_noise_sd >= 0.0) {
            return Err(invalid("quality_noise_sd", "must be non-negative"));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        let b = &self.benchmark;
        if !(0.0..=1.0).contains(&b.deviation_fraction) {
            return Err(invalid("benchmark.deviation_fraction", "must lie in [0, 1]"));
        }
        if !(b.deviation_factor.is_finite() && b.deviation_factor > 0.0) {
            return Err(invalid("benchmark.deviation_factor", "must be positive"));
        }
        if let PostedPriceSpec::MidRange { low, high } = b.posted_price {
            if !(low.is_finite() && high.is_finite() && 0.0 <= low && low <= high) {
                return Err(invalid("benchmark.posted_price", "need 0 <= low <= high"));
            }
        }
        Ok(())
    }

    /// Dollars to money units, rounded to the grid.
    pub fn to_money(&self, dollars: f64) -> Cents {
        (dollars * self.money_scale as f64).round() as Cents
    }

    pub fn to_dollars(&self, units: Cents) -> f64 {
        units as f64 / self.money_scale as f64
    }

    pub fn posted_price_rule(&self) -> PostedPriceRule<Cents> {
        match self.benchmark.posted_price {
            PostedPriceSpec::MidRange { low, high } => {
                PostedPriceRule::MidRange { low: self.to_money(low), high: self.to_money(high) }
            }
            PostedPriceSpec::SampledMedian => PostedPriceRule::SampledMedian,
        }
    }

    /// Short hex digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// A generated market together with the hidden device qualities.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub instance: MarketInstance<Cents>,
    pub true_quality: BTreeMap<AgentId, f64>,
}

impl GeneratedInstance {
    pub fn oracle(&self, noise_sd: f64) -> SyntheticRanker {
        synth_rank_oracle(self.true_quality.clone(), noise_sd)
    }
}

/// Splits `total` money units into `q` positive, non-increasing marginals.
pub fn split_total<R: Rng>(total: Cents, q: usize, rule: SplitRule, rng: &mut R) -> Vec<Cents> {
    let q_i = q as Cents;
    let total = total.max(q_i);
    let spare = total - q_i;
    let mut parts: Vec<Cents> = match rule {
        SplitRule::SortedUniformSpacings => {
            let mut cuts: Vec<Cents> = (1..q).map(|_| rng.random_range(0..=spare)).collect();
            cuts.sort_unstable();
            let mut prev = 0;
            let mut parts = Vec::with_capacity(q);
            for c in cuts.into_iter().chain(std::iter::once(spare)) {
                parts.push(c - prev + 1);
                prev = c;
            }
            parts
        }
        SplitRule::EqualShare => (0..q_i).map(|i| spare / q_i + 1 + Cents::from(i < spare % q_i)).collect(),
    };
    parts.sort_unstable_by(|a, b| b.cmp(a));
    parts
}

fn draw_total<R: Rng>(config: &ExperimentConfig, spec: &ValueSpec, rng: &mut R) -> Cents {
    let dollars = match config.distribution {
        ValueDistribution::RanD => {
            let [lo, hi] = spec.range.expect("validated");
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        ValueDistribution::NanD => {
            let n = Normal::new(spec.mu.expect("validated"), spec.sigma.expect("validated")).expect("validated sigma");
            n.sample(rng)
        }
    };
    config.to_money(dollars).max(1)
}

/// Draws one market from `config`. Agent ids are consecutive, category by
/// category, requesters before devices.
pub fn generate_instance(config: &ExperimentConfig, seed: u64) -> Result<GeneratedInstance, ExperimentError> {
    let mut rng = stream(seed, &[purpose::INSTANCE]);
    let mut agents = Vec::new();
    let mut true_quality = BTreeMap::new();
    let mut next_id: u32 = 1;
    for c in 0..config.k {
        for (side, count, spec, [qlo, qhi]) in [
            (Side::Buyer, config.m_i[c], &config.nu_r, config.Q_r),
            (Side::Seller, config.n_i[c], &config.nu_I, config.Q_I),
        ] {
            for _ in 0..count {
                let total = draw_total(config, spec, &mut rng);
                let q = rng.random_range(qlo..=qhi);
                let valuation = MarginalValuation::new(split_total(total, q, config.split_rule, &mut rng))?;
                let id = next_id;
                next_id += 1;
                if side == Side::Seller {
                    true_quality.insert(AgentId(id), rng.random::<f64>());
                }
                agents.push(Agent { id: AgentId(id), side, category: c, valuation });
            }
        }
    }
    let mut params = MechanismParams::new(config.to_money(config.epsilon), seed);
    params.gamma = config.gamma;
    params.beta = config.beta;
    params.quality_filter = config.quality_filter;
    let instance = MarketInstance::new(config.k, agents, params)?;
    Ok(GeneratedInstance { instance, true_quality })
}

/// Everything recorded for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub agents: Vec<AgentRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: AgentId,
    pub category: usize,
    pub side: Side,
    /// Units the agent is endowed with (`Λ` for requesters).
    pub capacity: usize,
    pub deviator: bool,
    pub utility: Cents,
    pub units_traded: usize,
    /// Requesters only.
    pub tasks_executed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category: usize,
    pub platform_utility: Cents,
    pub total_charge: Cents,
    pub failed: Option<String>,
}

/// Runs `mechanism` on a generated instance, applying misreports for
/// PPM-D. Returns the outcome and the set of deviators.
pub fn run_mechanism(
    config: &ExperimentConfig,
    mechanism: Mechanism,
    generated: &GeneratedInstance,
) -> (Outcome<Cents>, BTreeSet<AgentId>) {
    let oracle = generated.oracle(config.quality_noise_sd);
    let instance = &generated.instance;
    match mechanism {
        Mechanism::Quad => (run_quad(instance, &oracle), BTreeSet::new()),
        Mechanism::McAfee => (run_mcafee(instance, &oracle), BTreeSet::new()),
        Mechanism::Ppm => {
            (run_ppm(instance, &oracle, &config.posted_price_rule(), config.benchmark.acceptance_order), BTreeSet::new())
        }
        Mechanism::PpmD => {
            let mut rng = stream(instance.params.rng_seed, &[purpose::DEVIATION]);
            let b = &config.benchmark;
            let (reported, deviators) =
                apply_deviation(&instance.agents, b.deviation_fraction, b.deviation_factor, &mut rng);
            let lied = MarketInstance { agents: reported, ..instance.clone() };
            (run_ppm(&lied, &oracle, &config.posted_price_rule(), b.acceptance_order), deviators)
        }
    }
}

pub fn trial_seed(config: &ExperimentConfig, trial: usize) -> u64 {
    derive_seed(config.seed, &[purpose::INSTANCE, trial as u64])
}

pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialRecord, ExperimentError> {
    let seed = trial_seed(config, trial);
    let generated = generate_instance(config, seed)?;
    let truth = &generated.instance;
    let (outcome, deviators) = run_mechanism(config, config.mechanism, &generated);
    let metrics: RunMetrics<Cents> = collect_metrics(&outcome, truth);
    let mut task_rng: StreamRng = stream(seed, &[purpose::TASKS]);
    let tasks = execute_tasks(&outcome, truth, config.task_model, &mut task_rng);

    let agents = truth
        .agents
        .iter()
        .map(|a| AgentRecord {
            id: a.id,
            category: a.category,
            side: a.side,
            capacity: a.valuation.capacity(),
            deviator: deviators.contains(&a.id),
            utility: metrics.agent_utilities[&a.id],
            units_traded: outcome.units_of(a.id),
            tasks_executed: tasks.get(&a.id).copied(),
        })
        .collect();
    let categories = outcome
        .categories
        .iter()
        .enumerate()
        .map(|(c, r)| match r {
            Ok(co) => {
                let total_charge = truth
                    .category_agents(c)
                    .filter(|a| a.side == Side::Seller)
                    .map(|a| -co.payments.get(&a.id).copied().unwrap_or(0))
                    .sum();
                CategoryRecord { category: c, platform_utility: co.platform_revenue, total_charge, failed: None }
            }
            Err(f) => CategoryRecord { category: c, platform_utility: 0, total_charge: 0, failed: Some(f.error.clone()) },
        })
        .collect();
    Ok(TrialRecord { trial, seed, agents, categories })
}

/// All trials of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub trials: Vec<TrialRecord>,
}

/// Means over all trials, in money units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mechanism: Mechanism,
    pub trials: usize,
    pub mean_agent_utility: f64,
    pub mean_deviator_utility: Option<f64>,
    pub mean_truthful_utility: Option<f64>,
    pub mean_platform_utility: f64,
    pub min_platform_utility: Cents,
    pub min_agent_utility: Cents,
    pub mean_total_charge: f64,
    pub mean_tasks_executed: f64,
    pub failed_categories: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ExperimentResult {
    fn all_agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.trials.iter().flat_map(|t| &t.agents)
    }

    pub fn summary(&self) -> Summary {
        let cats = || self.trials.iter().flat_map(|t| &t.categories);
        let n = self.trials.len().max(1) as f64;
        Summary {
            mechanism: self.config.mechanism,
            trials: self.trials.len(),
            mean_agent_utility: mean(self.all_agents().map(|a| a.utility as f64)).unwrap_or(0.0),
            mean_deviator_utility: mean(self.all_agents().filter(|a| a.deviator).map(|a| a.utility as f64)),
            mean_truthful_utility: mean(self.all_agents().filter(|a| !a.deviator).map(|a| a.utility as f64)),
            mean_platform_utility: cats().map(|c| c.platform_utility as f64).sum::<f64>() / n,
            min_platform_utility: cats().map(|c| c.platform_utility).min().unwrap_or(0),
            min_agent_utility: self.all_agents().map(|a| a.utility).min().unwrap_or(0),
            mean_total_charge: cats().map(|c| c.total_charge as f64).sum::<f64>() / n,
            mean_tasks_executed: mean(self.all_agents().filter_map(|a| a.tasks_executed.map(|t| t as f64)))
                .unwrap_or(0.0),
            failed_categories: cats().filter(|c| c.failed.is_some()).count(),
        }
    }

    /// Mean tasks executed per requester slot (category, position), with
    /// the mean endowment `Λ` of that slot.
    pub fn tasks_by_requester(&self) -> Vec<(usize, usize, f64, f64)> {
        let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
        for t in &self.trials {
            let mut pos: BTreeMap<usize, usize> = BTreeMap::new();
            for a in t.agents.iter().filter(|a| a.side == Side::Buyer) {
                let slot = pos.entry(a.category).or_default();
                let e = acc.entry((a.category, *slot)).or_default();
                e.0 += a.tasks_executed.unwrap_or(0) as f64;
                e.1 += a.capacity as f64;
                e.2 += 1;
                *slot += 1;
            }
        }
        acc.into_iter().map(|((c, s), (t, l, n))| (c, s, t / n as f64, l / n as f64)).collect()
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let trials = (0..config.trials).into_par_iter().map(|t| run_trial(config, t)).collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult { config: config.clone(), config_hash: config.hash(), trials })
}

/// One output row. Every file shares this schema.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub experiment: String,
    pub mechanism: &'static str,
    pub category: String,
    /// Trial index, or `mean`.
    pub trial: String,
    pub metric: &'static str,
    pub agent_id: Option<u32>,
    pub deviator: Option<bool>,
    /// Dollars for money metrics, counts otherwise.
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub const CSV_FILES: [&str; 4] = ["agent_utility.csv", "platform_utility.csv", "total_charge.csv", "tasks_executed.csv"];

impl ExperimentResult {
    fn row(&self, category: String, trial: String, metric: &'static str, agent: Option<(u32, bool)>, value: f64) -> CsvRow {
        CsvRow {
            experiment: self.config.experiment.clone(),
            mechanism: self.config.mechanism.label(),
            category,
            trial,
            metric,
            agent_id: agent.map(|a| a.0),
            deviator: agent.map(|a| a.1),
            value,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
        }
    }

    /// Rows of every CSV file, keyed by file name.
    pub fn csv_rows(&self) -> BTreeMap<&'static str, Vec<CsvRow>> {
        let c = &self.config;
        let mut out: BTreeMap<&'static str, Vec<CsvRow>> = CSV_FILES.iter().map(|&f| (f, Vec::new())).collect();
        let n = self.trials.len() as f64;
        let mut cat_means: BTreeMap<(usize, &'static str), f64> = BTreeMap::new();
        let mut slot_means: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();

        for t in &self.trials {
            let trial = t.trial.to_string();
            let mut by_cat: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
            for a in &t.agents {
                let u = c.to_dollars(a.utility);
                out.get_mut("agent_utility.csv").unwrap().push(self.row(
                    a.category.to_string(),
                    trial.clone(),
                    "utility",
                    Some((a.id.0, a.deviator)),
                    u,
                ));
                let e = by_cat.entry(a.category).or_default();
                e.0 += u;
                e.1 += 1;
                if let Some(done) = a.tasks_executed {
                    let tasks = out.get_mut("tasks_executed.csv").unwrap();
                    tasks.push(self.row(a.category.to_string(), trial.clone(), "tasks_executed", Some((a.id.0, a.deviator)), done as f64));
                    tasks.push(self.row(a.category.to_string(), trial.clone(), "endowed_tasks", Some((a.id.0, a.deviator)), a.capacity as f64));
                    let s = slot.entry(a.category).or_default();
                    let m = slot_means.entry((a.category, *s)).or_default();
                    m.0 += done as f64 / n;
                    m.1 += a.capacity as f64 / n;
                    *s += 1;
                }
            }
            for (cat, (sum, count)) in by_cat {
                let v = sum / count as f64;
                out.get_mut("agent_utility.csv").unwrap().push(self.row(cat.to_string(), trial.clone(), "mean_utility", None, v));
                *cat_means.entry((cat, "mean_utility")).or_default() += v / n;
            }
            for cr in &t.categories {
                let pu = c.to_dollars(cr.platform_utility);
                let tc = c.to_dollars(cr.total_charge);
                out.get_mut("platform_utility.csv").unwrap().push(self.row(cr.category.to_string(), trial.clone(), "platform_utility", None, pu));
                out.get_mut("total_charge.csv").unwrap().push(self.row(cr.category.to_string(), trial.clone(), "total_charge", None, tc));
                *cat_means.entry((cr.category, "platform_utility")).or_default() += pu / n;
                *cat_means.entry((cr.category, "total_charge")).or_default() += tc / n;
            }
        }

        for ((cat, metric), v) in cat_means {
            let file = match metric {
                "mean_utility" => "agent_utility.csv",
                "platform_utility" => "platform_utility.csv",
                _ => "total_charge.csv",
            };
            out.get_mut(file).unwrap().push(self.row(cat.to_string(), "mean".into(), metric, None, v));
        }
        let s = self.summary();
        let all = "all".to_string();
        let util = out.get_mut("agent_utility.csv").unwrap();
        for (metric, v) in [("mean_deviator_utility", s.mean_deviator_utility), ("mean_truthful_utility", s.mean_truthful_utility)] {
            if let Some(v) = v {
                util.push(self.row(all.clone(), "mean".into(), metric, None, v / c.money_scale as f64));
            }
        }
        for ((cat, pos), (done, lambda)) in slot_means {
            let tasks = out.get_mut("tasks_executed.csv").unwrap();
            tasks.push(self.row(cat.to_string(), "mean".into(), "tasks_executed", Some((pos as u32, false)), done));
            tasks.push(self.row(cat.to_string(), "mean".into(), "endowed_tasks", Some((pos as u32, false)), lambda));
        }
        out
    }

    /// Writes the CSV files and `metadata.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
        let mut written = Vec::new();
        for (name, rows) in self.csv_rows() {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path).map_err(|source| ExperimentError::Csv { path: path.clone(), source })?;
            for r in rows {
                w.serialize(r).map_err(|source| ExperimentError::Csv { path: path.clone(), source })?;
            }
            w.flush().map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
            written.push(path);
        }
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": self.config_hash,
            "summary": self.summary(),
        });
        let path = dir.join("metadata.json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
        written.push(path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_dmr;
    use rand::SeedableRng;

    pub(crate) const RAND: &str = r#"
experiment = "unit"
k = 2
m_i = [5, 10]
n_i = [15, 30]
distribution = "RanD"
nu_r = { range = [8.0, 30.0] }
nu_I = { range = [5.0, 25.0] }
Q_r = [1, 4]
Q_I = [1, 4]
epsilon = 0.01
mechanism = "quad"
trials = 3
seed = 7
"#;

    #[test]
    fn parses_and_defaults() {
        let c = ExperimentConfig::from_toml(RAND).unwrap();
        assert_eq!((c.gamma, c.beta, c.money_scale), (3, 3, 100));
        assert_eq!(c.benchmark.deviation_factor, 1.25);
        assert_eq!(c.to_money(c.epsilon), 1);
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = RAND.replace("m_i = [5, 10]", "m_i = [5]");
        let e = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(e.starts_with("m_i:"), "{e}");
        let bad = RAND.replace("nu_I = { range = [5.0, 25.0] }", "nu_I = { mu = 3.0 }");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().to_string().starts_with("nu_I.range"));
        let nand = RAND.replace("\"RanD\"", "\"NanD\"");
        assert!(ExperimentConfig::from_toml(&nand).unwrap_err().to_string().starts_with("nu_r.mu"));
        let bad = RAND.replace("trials = 3", "trials = 0");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().to_string().starts_with("trials"));
        let bad = RAND.replace("epsilon = 0.01", "epsilon = 0.001");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().to_string().starts_with("epsilon"));
    }

    #[test]
    fn splits_are_dmr_and_sum_to_total() {
        let mut rng = StreamRng::seed_from_u64(3);
        for rule in [SplitRule::SortedUniformSpacings, SplitRule::EqualShare] {
            for total in [1i64, 5, 97, 3000] {
                for q in 1..6 {
                    let parts = split_total(total, q, rule, &mut rng);
                    assert_eq!(parts.len(), q);
                    assert_eq!(parts.iter().sum::<i64>(), total.max(q as i64));
                    assert!(validate_dmr(&parts).is_ok());
                }
            }
        }
        assert_eq!(split_total(1234, 1, SplitRule::SortedUniformSpacings, &mut rng), vec![1234]);
    }

    #[test]
    fn generated_values_respect_the_ranges() {
        let c = ExperimentConfig::from_toml(RAND).unwrap();
        for s in 0..20 {
            let g = generate_instance(&c, s).unwrap();
            assert_eq!(g.instance.agents.len(), 5 + 15 + 10 + 30);
            for a in &g.instance.agents {
                let total = a.valuation.total();
                let (lo, hi, q) = match a.side {
                    Side::Buyer => (800, 3000, c.Q_r),
                    Side::Seller => (500, 2500, c.Q_I),
                };
                assert!((lo..=hi).contains(&total), "{total}");
                assert!((q[0]..=q[1]).contains(&a.valuation.capacity()));
            }
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let mut c = ExperimentConfig::from_toml(RAND).unwrap();
        c.trials = 1;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&c).unwrap().write(a.path()).unwrap();
        run_experiment(&c).unwrap().write(b.path()).unwrap();
        for f in CSV_FILES.iter().chain(&["metadata.json"]) {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn deviator_flags_follow_the_seeded_draw() {
        let mut c = ExperimentConfig::from_toml(RAND).unwrap();
        c.mechanism = Mechanism::PpmD;
        c.trials = 1;
        let r = run_experiment(&c).unwrap();
        let g = generate_instance(&c, trial_seed(&c, 0)).unwrap();
        let mut rng = stream(g.instance.params.rng_seed, &[purpose::DEVIATION]);
        let (_, expected) = apply_deviation(&g.instance.agents, 0.5, 1.25, &mut rng);
        let flagged: BTreeSet<AgentId> = r.trials[0].agents.iter().filter(|a| a.deviator).map(|a| a.id).collect();
        assert_eq!(flagged, expected);
        assert_eq!(flagged.len(), 30);
        let rows = r.csv_rows();
        let dev_rows = rows["agent_utility.csv"].iter().filter(|r| r.deviator == Some(true)).count();
        assert_eq!(dev_rows, 30);
    }

    #[test]
    fn every_row_carries_hash_and_seed() {
        let c = ExperimentConfig::from_toml(RAND).unwrap();
        let r = run_experiment(&c).unwrap();
        for rows in r.csv_rows().values() {
            assert!(!rows.is_empty());
            assert!(rows.iter().all(|row| row.config_hash == r.config_hash && row.seed == 7));
        }
    }
}
