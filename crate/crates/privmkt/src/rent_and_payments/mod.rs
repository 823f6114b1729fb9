//! Information rents from the envelope integrand, synthesis of the payment
//! rules β, θ and ρ, and checks of the incentive conditions on σ.

mod conditions;
mod envelope;
mod synthesis;

pub use conditions::{
    check_necessary, check_sufficient, delta_dic_certificate, min_policy_values, stopping_control_feasibility,
    CandidateCheck, CellArg, ConditionKind, DicCertificate, FeasibilityReport, MarginReport, PeriodDelta,
    PeriodMargins, StoppingTarget, Verdict, MARGIN_TOL,
};
pub use envelope::{envelope_derivative, information_rent, trapezoid, RentTable};
pub use synthesis::{
    synthesize, synthesize_beta, synthesize_rho, synthesize_rho_capped, synthesize_theta, zero_rho_threshold_solve,
    Synthesis,
};
