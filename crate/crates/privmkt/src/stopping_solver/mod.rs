//! Each owner's finite-horizon stopping problem under a fixed mechanism:
//! backward induction, the stopping incentive G, regions and thresholds.

mod beliefs;
mod export;
mod rules;
mod solve;

pub use beliefs::{build_beliefs, BeliefModel, OwnerModel};
pub use export::{solution_csv, thresholds_json};
pub use rules::{BudgetLattice, MechanismRules, ReportSpace, Sigma, Threshold, ThresholdTable};
pub use solve::{
    branch_values, extract_thresholds, g_incentive, interim_payoff, solve_fixed_point, solve_owner,
    solve_value_function, stopping_region, FixedPoint, OwnerSolution, ThresholdExtraction, ValueSolution,
    MAX_FIXED_POINT_ITERS, TIE_TOL,
};
