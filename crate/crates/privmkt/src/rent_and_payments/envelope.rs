use crate::error::{Error, Result};
use crate::market_core::kernel_cdf_sensitivity;
use crate::stopping_solver::OwnerModel;
use serde::{Deserialize, Serialize};

/// Envelope integrands and information rents for one owner.
///
/// `d[t][k][x][τ−t]` is E[Σ_{s=t}^{τ} (1 − e^{σ_s}) 𝒢^s_t] from value index x
/// at level k; `rent[t][k][v][τ−t]` is Λ(v, v̄; τ) and `sup[t][k][v]` its
/// maximum over τ ∈ {t..T}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RentTable {
    pub d: Vec<Vec<Vec<Vec<f64>>>>,
    pub rent: Vec<Vec<Vec<Vec<f64>>>>,
    pub sup: Vec<Vec<Vec<f64>>>,
    grid: Vec<f64>,
    has_sensitivity: bool,
}

/// Trapezoid ∫_{grid[a]}^{grid[b]} f, signed by orientation.
pub fn trapezoid(grid: &[f64], f: &[f64], a: usize, b: usize) -> f64 {
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut acc = 0.0;
    for j in lo..hi {
        acc += 0.5 * (f[j] + f[j + 1]) * (grid[j + 1] - grid[j]);
    }
    sign * acc
}

impl RentTable {
    /// Builds all integrands by backward recursion: the 𝒢 product is
    /// multiplicative along the path, so D(t; τ) = a_t + E[g · D(t+1; τ)].
    pub fn build(model: &OwnerModel) -> Result<Self> {
        let horizon = model.horizon();
        let m = model.m();
        let grid: Vec<f64> = model.inst.grid(model.owner).points().to_vec();
        let kernel = model.inst.kernel(model.owner);
        let vgrid = model.inst.grid(model.owner);
        let widths = vgrid.cell_widths();
        let has_sensitivity = m >= 2;
        let bins = model.inst.bins.count();
        // weight[t][v][bin][v'] = P(v'|v)·(−∂F/∂x)/f = −∂F(v'|v)/∂x · w(v')
        let mut weight = vec![vec![vec![vec![0.0; m]; bins]; m]; horizon];
        if has_sensitivity {
            for (t, wt) in weight.iter_mut().enumerate() {
                for (v, wv) in wt.iter_mut().enumerate() {
                    for (b, wb) in wv.iter_mut().enumerate() {
                        for (v2, w) in wb.iter_mut().enumerate() {
                            let (slope, _) = kernel_cdf_sensitivity(kernel, vgrid, t, v2, v, b)?;
                            *w = -slope * widths[v2];
                        }
                    }
                }
            }
        }
        let mut d: Vec<Vec<Vec<Vec<f64>>>> = (0..=horizon)
            .map(|t| vec![vec![vec![0.0; horizon - t + 1]; m]; model.lattice.len(t)])
            .collect();
        for t in (0..=horizon).rev() {
            for k in 0..model.lattice.len(t) {
                for x in 0..m {
                    let mut a = 0.0;
                    let mut later = vec![0.0; horizon - t];
                    for &(partial, pr) in model.others(t) {
                        let cell = model.cell(partial, x);
                        let e = model.eps_index(t, cell);
                        a += pr * -model.inst.eps.get(e).exp_m1();
                        if t < horizon && has_sensitivity {
                            let (k2, bin) = model.step(t, k, e);
                            for (v2, &w) in weight[t][x][bin].iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                for (j, l) in later.iter_mut().enumerate() {
                                    *l += pr * w * d[t + 1][k2][v2][j];
                                }
                            }
                        }
                    }
                    let row = &mut d[t][k][x];
                    row[0] = a;
                    for j in 0..horizon - t {
                        row[j + 1] = if has_sensitivity { a + later[j] } else { f64::NAN };
                    }
                }
            }
        }
        let top = m - 1;
        let mut rent = Vec::with_capacity(horizon + 1);
        let mut sup = Vec::with_capacity(horizon + 1);
        for (t, dt) in d.iter().enumerate() {
            let mut rt = Vec::with_capacity(dt.len());
            let mut st = Vec::with_capacity(dt.len());
            for dk in dt {
                let mut rk = vec![vec![0.0; horizon - t + 1]; m];
                for j in 0..=horizon - t {
                    let f: Vec<f64> = dk.iter().map(|row| row[j]).collect();
                    for (v, r) in rk.iter_mut().enumerate() {
                        r[j] = if m == 1 { 0.0 } else { trapezoid(&grid, &f, top, v) };
                    }
                }
                st.push(rk.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect());
                rt.push(rk);
            }
            rent.push(rt);
            sup.push(st);
        }
        Ok(Self { d, rent, sup, grid, has_sensitivity })
    }

    pub fn envelope(&self, t: usize, k: usize, x: usize, tau: usize) -> Result<f64> {
        if tau < t || tau >= t + self.d[t][k][x].len() {
            return Err(Error::Argument(format!("tau = {tau} outside [{t}, T]")));
        }
        if tau > t && !self.has_sensitivity {
            return Err(Error::SensitivityUndefined("single-point value grid".into()));
        }
        Ok(self.d[t][k][x][tau - t])
    }

    /// Λ(v, v_anchor; τ) = ∫_{v_anchor}^{v} D(x; τ) dx by trapezoid on the grid.
    pub fn rent_between(&self, t: usize, k: usize, v: usize, anchor: usize, tau: usize) -> Result<f64> {
        if v == anchor || self.grid.len() == 1 {
            return Ok(0.0);
        }
        self.envelope(t, k, v, tau)?;
        let f: Vec<f64> = self.d[t][k].iter().map(|row| row[tau - t]).collect();
        Ok(trapezoid(&self.grid, &f, anchor, v))
    }

    /// Λ(v, v̄; τ).
    pub fn rent_to_top(&self, t: usize, k: usize, v: usize, tau: usize) -> f64 {
        self.rent[t][k][v][tau - t]
    }

    pub fn sup_rent(&self, t: usize, k: usize, v: usize) -> f64 {
        self.sup[t][k][v]
    }
}

/// E[Σ_{s=t}^{τ} (1 − e^{σ_s}) 𝒢^s_t] from (t, k, x).
pub fn envelope_derivative(model: &OwnerModel, t: usize, k: usize, x: usize, tau: usize) -> Result<f64> {
    RentTable::build(model)?.envelope(t, k, x, tau)
}

pub fn information_rent(model: &OwnerModel, t: usize, k: usize, v: usize, anchor: usize, tau: usize) -> Result<f64> {
    RentTable::build(model)?.rent_between(t, k, v, anchor, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::market_core::{BudgetBinning, EpsilonGrid, MarketInstance, OwnerSpec, TransitionKernel, ValueGrid};
    use crate::stopping_solver::{build_beliefs, BeliefModel, BudgetLattice, Sigma};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(inst: &MarketInstance, sigma: &Sigma) -> (BudgetLattice, BeliefModel) {
        let lat = BudgetLattice::from_sigma(inst, sigma);
        let b = build_beliefs(inst, sigma, &lat, None);
        (lat, b)
    }

    /// CDF rows affine in the conditioning value: F(v'|x) falls by 0.1 per unit of x.
    fn affine_instance() -> MarketInstance {
        let rows = vec![vec![0.5, 0.3, 0.2], vec![0.4, 0.3, 0.3], vec![0.3, 0.3, 0.4]];
        let kernel = TransitionKernel {
            initial: vec![1.0 / 3.0; 3],
            transitions: vec![rows.iter().map(|r| vec![r.clone()]).collect()],
        };
        let eps = EpsilonGrid::new(vec![0.1, 0.4, 0.9]).unwrap();
        let bins = BudgetBinning::uniform(1, 1, eps.cap()).unwrap();
        let owner =
            OwnerSpec { label: "aff".into(), grid: ValueGrid::new(vec![1.0, 2.0, 3.0]).unwrap(), kernel, budget: 0.0 };
        MarketInstance::new(1, vec![owner], 1.0, 0.0, eps, bins, false).unwrap()
    }

    #[test]
    fn single_period_integrand_is_the_loss_slope() {
        let inst = fixtures::constant_sigma_instance();
        let sigma = Sigma::constant(&inst, 2);
        let (lat, b) = table(&inst, &sigma);
        let model = OwnerModel::new(&inst, 0, &sigma, &lat, &b);
        let r = RentTable::build(&model).unwrap();
        let expect = 1.0 - 0.6f64.exp();
        for t in 0..=inst.horizon {
            for k in 0..lat.len(t) {
                for x in 0..4 {
                    assert!((r.envelope(t, k, x, t).unwrap() - expect).abs() < 1e-15);
                    // iid kernel: later periods add nothing
                    for tau in t..=inst.horizon {
                        assert!((r.envelope(t, k, x, tau).unwrap() - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn affine_kernel_matches_hand_sum() {
        let inst = affine_instance();
        let sigma = Sigma { table: vec![vec![0, 1, 2, 0], vec![2, 1, 0, 0]] };
        let (lat, b) = table(&inst, &sigma);
        let model = OwnerModel::new(&inst, 0, &sigma, &lat, &b);
        let r = RentTable::build(&model).unwrap();
        let eps = [0.1f64, 0.4, 0.9];
        let a0 = |x: usize| 1.0 - eps[sigma.table[0][x]].exp();
        let a1 = |v: usize| 1.0 - eps[sigma.table[1][v]].exp();
        // −∂F/∂x = 0.1 below the top; half-cell widths at the ends
        let weights = [0.1 * 0.5, 0.1 * 1.0, 0.0];
        let later: f64 = (0..3).map(|v| weights[v] * a1(v)).sum();
        for x in 0..3 {
            let d = r.envelope(0, 0, x, 1).unwrap();
            assert!((d - (a0(x) + later)).abs() < 1e-12, "x={x}: {d}");
        }
    }

    #[test]
    fn rents_under_constant_sigma() {
        let inst = fixtures::constant_sigma_instance();
        let sigma = Sigma::constant(&inst, 1);
        let (lat, b) = table(&inst, &sigma);
        let model = OwnerModel::new(&inst, 0, &sigma, &lat, &b);
        let r = RentTable::build(&model).unwrap();
        let g = inst.grid(0);
        let a = 0.4f64.exp_m1();
        for t in 0..=inst.horizon {
            for tau in t..=inst.horizon {
                for v in 0..g.len() {
                    let closed = (g.upper() - g.get(v)) * a;
                    assert!((r.rent_to_top(t, 0, v, tau) - closed).abs() < 1e-12);
                    assert_eq!(r.rent_between(t, 0, v, v, tau).unwrap(), 0.0);
                }
                assert_eq!(r.rent_to_top(t, 0, g.top(), tau), 0.0);
            }
        }
        let via_fn = information_rent(&model, 0, 0, 0, 3, 1).unwrap();
        assert!((via_fn - 1.5 * a).abs() < 1e-12);
        assert!((envelope_derivative(&model, 0, 0, 2, 0).unwrap() + a).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_is_signed() {
        let grid = [0.0, 1.0, 3.0];
        let f = [1.0, 1.0, 2.0];
        assert_eq!(trapezoid(&grid, &f, 0, 2), 1.0 + 3.0);
        assert_eq!(trapezoid(&grid, &f, 2, 0), -4.0);
        assert_eq!(trapezoid(&grid, &f, 1, 1), 0.0);
    }

    #[test]
    fn single_point_grid_has_no_sensitivity() {
        let s = r#"{"horizon": 1, "epsilon_grid": [0.2], "budget_bins": 1, "L": 1.0, "degenerate_test_mode": true,
                   "owners": [{"grid": [2.0], "kernel": {"generator": "uniform"}}]}"#;
        let inst = MarketInstance::from_json_str(s).unwrap();
        let sigma = Sigma::constant(&inst, 0);
        let (lat, b) = table(&inst, &sigma);
        let model = OwnerModel::new(&inst, 0, &sigma, &lat, &b);
        let r = RentTable::build(&model).unwrap();
        assert!(r.envelope(0, 0, 0, 0).is_ok());
        assert!(matches!(r.envelope(0, 0, 0, 1), Err(Error::SensitivityUndefined(_))));
        assert_eq!(r.rent_to_top(0, 0, 0, 1), 0.0);
        assert!(matches!(r.envelope(1, 0, 0, 0), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rents_nonnegative_on_fosd_instances(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = fixtures::random_single_owner(&mut rng, 2, 5);
            let sigma = fixtures::random_monotone_sigma(&mut rng, &inst);
            prop_assume!(inst.kernels_valid());
            let (lat, b) = table(&inst, &sigma);
            let model = OwnerModel::new(&inst, 0, &sigma, &lat, &b);
            let r = RentTable::build(&model).unwrap();
            for t in 0..=2 {
                for k in 0..lat.len(t) {
                    for tau in t..=2 {
                        prop_assert_eq!(r.rent_to_top(t, k, 4, tau), 0.0);
                        for v in 0..5 {
                            prop_assert!(r.rent_to_top(t, k, v, tau) >= -1e-9);
                        }
                    }
                }
            }
        }
    }
}
