//! Quality-aware multi-unit double auction for crowdsensing markets.
//!
//! Task requesters (buyers) and sensing devices (sellers) report
//! per-unit values with decreasing marginal returns. [`auction::run_quad`]
//! selects quality devices by peer-graded Borda rounds, splits each
//! category's market into two random arenas and lets every arena trade at
//! the other arena's clearing price. The [`benchmarks`] module provides the
//! McAfee double auction and a posted-price mechanism for comparison;
//! [`metrics`] and [`experiment`] turn outcomes into the reported
//! quantities.
//!
//! All mechanism code is generic over [`Money`]. The simulation harness uses
//! [`Cents`].

pub mod auction;
pub mod benchmarks;
pub mod experiment;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod money;
pub mod quality;
pub mod rng;
pub mod verify;

pub use money::Money;

/// Integer minor currency units; exact grid arithmetic.
pub type Cents = i64;
/// Exact rational money.
pub type ExactMoney = num_rational::Rational64;

pub type CentsValuation = model::MarginalValuation<Cents>;
pub type CentsAgent = model::Agent<Cents>;
pub type CentsInstance = model::MarketInstance<Cents>;
pub type CentsOutcome = model::Outcome<Cents>;
