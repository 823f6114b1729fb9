//! The buyer's side: exact and first-order costs, participation checks and
//! a coordinate-descent search over assignment rules and thresholds.

mod chain;
mod cost;
mod search;

pub use cost::{
    check_ir, direct_cost, expected_stopping_time, relaxed_cost, threshold_policy_value, CostMethod, DirectCost,
    IrMargin, EXACT_STATE_LIMIT, FALLBACK_TRIALS,
};
pub use search::{
    optimize, DicSummary, Evaluation, OptimizationResult, SigmaFamily, SigmaParametrization, AFFINE_SLOPES, IR_TOL,
};
pub(crate) use chain::ledger_allows_stop;
