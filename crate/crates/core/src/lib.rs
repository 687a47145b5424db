//! Batch-auction rebate laboratory: market model, Nash controls of two
//! market makers, rebate contracts, Monte Carlo simulation, a small neural
//! rebate policy and a search over the exchange fee.

// Comparisons of the form `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contract;
pub mod diagnostics;
pub mod equilibrium;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod policy;
pub mod search;
pub mod sim;
pub mod stats;

pub use error::{EquilibriumError, Error, Result};
pub use model::{JumpKind, Maker, MarketState};
pub use params::ModelParams;
