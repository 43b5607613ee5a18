//! Liquidity provision in a two-asset automated market maker: optimal trades,
//! pool dynamics, the liquidity provider's dynamic program, stationary
//! analysis of the pool state, fee and weight design, and market-data
//! estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod pricing;
pub mod quadrature;
pub mod market;
pub mod dynamics;
pub mod portfolio;
pub mod dp;
pub mod stationary;
pub mod design;
pub mod data;
pub mod config;

pub use error::{Error, Result};
pub use market::{build_quadrature, sample_disturbance, DisturbanceNode, MarketParams};
pub use pricing::{FeeRate, PoolSpec, PricingFunction, Side, TradeFractions};
pub use dynamics::{fee_exact, il_exact, net_profit_condition, step_period, PeriodOutcome};
pub use portfolio::{ConstraintSet, Weights};
pub use dp::{solve_fixed_point, DpSolution, PolicyTable, SolverConfig, ValueFunction};
pub use stationary::{stationary, stationary_expectation, transition_kernel, StationaryDistribution, TransitionKernel};
pub use design::{efficient_allocation, optimal_design, sweep, DesignResult, SweepAxis, SweepResult};
pub use data::{estimate_params, load_klines, ols, KlineSchema, MarketEstimates, OlsResult, PriceSeries};
pub use config::{OutputFormat, RunConfig};
