//! Command-line driver for the QUAD simulator.
//!
//! Logging is controlled by `QUAD_LOG` (e.g. `QUAD_LOG=debug`).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use quad_core::experiment::{run_experiment, ExperimentConfig, Mechanism};
use quad_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "quad", version, about = "Quality-aware double auction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded trials of one mechanism and write CSV results.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config mechanism.
        #[arg(long, value_enum)]
        mechanism: Option<MechanismArg>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the built-in check suites. Exits non-zero if any check fails.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Quad,
    Mcafee,
    Ppm,
    #[value(name = "ppm-d")]
    PpmD,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Self {
        match m {
            MechanismArg::Quad => Mechanism::Quad,
            MechanismArg::Mcafee => Mechanism::McAfee,
            MechanismArg::Ppm => Mechanism::Ppm,
            MechanismArg::PpmD => Mechanism::PpmD,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Examples,
    Properties,
}

fn simulate(
    config: PathBuf,
    seed: Option<u64>,
    mechanism: Option<MechanismArg>,
    out: PathBuf,
    trials: Option<usize>,
) -> anyhow::Result<()> {
    let mut c = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(m) = mechanism {
        c.mechanism = m.into();
    }
    if let Some(t) = trials {
        c.trials = t;
    }
    c.validate().with_context(|| format!("invalid overrides for {}", config.display()))?;
    log::info!("running {} trials of {} (seed {})", c.trials, c.mechanism.label(), c.seed);
    let result = run_experiment(&c)?;
    for path in result.write(&out)? {
        log::debug!("wrote {}", path.display());
    }
    let s = result.summary();
    println!(
        "{} {} trials={} mean_agent_utility={:.4} mean_platform_utility={:.4} mean_total_charge={:.4} mean_tasks_executed={:.3}",
        c.experiment,
        c.mechanism.label(),
        s.trials,
        s.mean_agent_utility / c.money_scale as f64,
        s.mean_platform_utility / c.money_scale as f64,
        s.mean_total_charge / c.money_scale as f64,
        s.mean_tasks_executed,
    );
    if s.failed_categories > 0 {
        log::warn!("{} category runs failed; see metadata.json", s.failed_categories);
    }
    Ok(())
}

fn verify(suite: SuiteArg) -> bool {
    let suite = match suite {
        SuiteArg::Examples => Suite::Examples,
        SuiteArg::Properties => Suite::Properties,
    };
    let checks = run_suite(suite);
    let mut ok = true;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{suite}: {} checks, {failed} failed", checks.len());
    ok
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUAD_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, seed, mechanism, out, trials } => match simulate(config, seed, mechanism, out, trials) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Verify { suite } => {
            if verify(suite) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
