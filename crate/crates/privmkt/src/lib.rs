//! Discretized engine for dynamic markets in which a buyer purchases
//! differential-privacy loss from data owners whose valuations evolve over time.

pub mod error;
pub mod market_core;
pub mod privacy_ledger;

pub use error::{Error, Result};
pub mod fixtures;
pub mod stopping_solver;
pub mod rent_and_payments;
pub mod dic_oracle;
pub mod buyer_optimizer;
pub mod simulator;
