//! Problem data: grids, Markov kernels over instrumental values, loss
//! primitives and the market instance.

mod grid;
mod instance;
mod kernel;

pub use grid::{BudgetBinning, EpsilonGrid, ValueGrid};
pub use instance::{
    BinsSpec, GeneratorSpec, InstanceFile, KernelSpec, KernelTable, MarketInstance, OptimizerConfig, OwnerFile,
    OwnerSpec,
};
pub use kernel::{
    drift_kernel, kernel_cdf_sensitivity, sticky_kernel, uniform_kernel, validate_kernel, FosdViolation,
    KernelReport, TransitionKernel,
};

/// Monetary loss v·(e^ε − 1) of an owner with value v.
pub fn flow_loss(v: f64, eps: f64) -> f64 {
    v * eps.exp_m1()
}

pub fn stage_utility(v: f64, eps: f64, payment: f64) -> f64 {
    -flow_loss(v, eps) + payment
}

/// Buyer's accuracy loss L·e^{−ε}.
pub fn buyer_utility_loss(eps: f64, l: f64) -> f64 {
    l * (-eps).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        assert!((flow_loss(2.0, 2f64.ln()) - 2.0).abs() < 1e-15);
        assert_eq!(flow_loss(1.5, 0.0), 0.0);
        let oracle = 0.5f64.exp() - 1.0;
        assert!((flow_loss(1.0, 0.5) - oracle).abs() < 1e-15);
        assert!((flow_loss(1.0, 0.5) - 0.648_721_270_700_128).abs() < 1e-12);
    }

    #[test]
    fn utility_examples() {
        assert!(stage_utility(2.0, 2f64.ln(), 2.0).abs() < 1e-15);
        assert_eq!(stage_utility(7.0, 0.0, 1.3), 1.3);
        assert!((stage_utility(1.0, 0.5, 1.0) - (2.0 - 0.5f64.exp())).abs() < 1e-15);
        assert!((stage_utility(1.0, 0.5, 1.0) - 0.351_278_729_299_872).abs() < 1e-12);
    }

    #[test]
    fn buyer_loss_examples() {
        assert!((buyer_utility_loss(1e-12, 10.0) - 10.0).abs() < 1e-9);
        assert!((buyer_utility_loss(10f64.ln(), 10.0) - 1.0).abs() < 1e-14);
        assert!((buyer_utility_loss(1.0, 5.0) - 5.0 / 1f64.exp()).abs() < 1e-15);
        assert!((buyer_utility_loss(1.0, 5.0) - 1.839_397_205_857_211_6).abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_and_linear_on_grid() {
        let vs = [0.5, 1.0, 2.0, 3.5];
        let es = [0.05, 0.1, 0.4, 1.0];
        for &v in &vs {
            for w in es.windows(2) {
                assert!(flow_loss(v, w[1]) > flow_loss(v, w[0]));
            }
            for &e in &es {
                assert!((flow_loss(2.0 * v, e) - 2.0 * flow_loss(v, e)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_strictly_increasing_in_eps(v in 0.01f64..10.0, e in 0.0f64..2.0, de in 1e-6f64..1.0) {
            prop_assert!(flow_loss(v, e + de) > flow_loss(v, e));
        }
    }
}
