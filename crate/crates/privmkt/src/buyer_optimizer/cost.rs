use super::chain::{chain_size, forward_chain};
use crate::error::Result;
use crate::market_core::MarketInstance;
use crate::simulator::monte_carlo;
use crate::stopping_solver::{
    branch_values, build_beliefs, BudgetLattice, MechanismRules, OwnerModel, Sigma, ThresholdTable,
    ValueSolution,
};
use serde::{Deserialize, Serialize};

/// Above this many (level, cell) states the direct cost falls back to Monte Carlo.
pub const EXACT_STATE_LIMIT: usize = 4_000_000;
pub const FALLBACK_TRIALS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectCost {
    pub value: f64,
    pub std_error: Option<f64>,
    pub method: CostMethod,
}

/// Buyer's ex-ante cost: accuracy loss while anyone is active, β to
/// continuing owners and θ + ρ to owners in their stopping period.
pub fn direct_cost(inst: &MarketInstance, rules: &MechanismRules, thresholds: &[ThresholdTable]) -> Result<DirectCost> {
    rules.check(inst)?;
    if chain_size(inst, &rules.lattice) > EXACT_STATE_LIMIT {
        let s = monte_carlo(inst, rules, thresholds, FALLBACK_TRIALS, 0, 0)?;
        return Ok(DirectCost { value: s.buyer_mean_cost, std_error: s.buyer_std_error, method: CostMethod::MonteCarlo });
    }
    let mut total = 0.0;
    forward_chain(inst, &rules.sigma, &rules.lattice, thresholds, false, |s| {
        let p = s.measures[0];
        let eps = inst.eps.get(rules.sigma.table[s.t][s.cell]);
        let mut c = inst.l * (-eps).exp();
        for (i, r) in s.reports.iter().enumerate() {
            if r.is_some() {
                c += if s.stops[i] {
                    rules.theta[i][s.t][s.level][s.cell] + rules.rho[i][s.t]
                } else {
                    rules.beta[i][s.t][s.level][s.cell]
                };
            }
        }
        total += p * c;
    })?;
    Ok(DirectCost { value: total, std_error: None, method: CostMethod::Exact })
}

/// First-order objective: accuracy loss, the privacy loss at true values and
/// the virtual-cost correction (1 − F₀)/f₀·𝒢, over κ-truncated paths.
pub fn relaxed_cost(inst: &MarketInstance, sigma: &Sigma, kappa: &[ThresholdTable]) -> Result<f64> {
    sigma.check(inst)?;
    let lattice = BudgetLattice::from_sigma(inst, sigma);
    let mut total = 0.0;
    forward_chain(inst, sigma, &lattice, kappa, true, |s| {
        let eps = inst.eps.get(sigma.table[s.t][s.cell]);
        let a = eps.exp_m1();
        let mut c = s.measures[0] * inst.l * (-eps).exp();
        for (i, r) in s.reports.iter().enumerate() {
            if let Some(v) = r {
                c += a * (s.measures[0] * inst.grid(i).get(*v) - s.measures[1 + i]);
            }
        }
        total += c;
    })?;
    Ok(total)
}

/// Value of following the threshold rule `table` under truthful reporting, `[t][level][v]`.
pub fn threshold_policy_value(model: &OwnerModel, rules: &MechanismRules, table: &ThresholdTable) -> Vec<Vec<Vec<f64>>> {
    let horizon = model.horizon();
    let m = model.m();
    let mut out: Vec<Vec<Vec<f64>>> = (0..=horizon).map(|t| vec![vec![0.0; m]; model.lattice.len(t)]).collect();
    for t in (0..=horizon).rev() {
        let (head, tail) = out.split_at_mut(t + 1);
        let next = tail.first().map(|n| n.as_slice());
        for k in 0..model.lattice.len(t) {
            for v in 0..m {
                let (js, jc) = branch_values(model, rules, next, t, k, v, v);
                let stop = model.stop_allowed(t) && table.kl[t][k].admits(v);
                head[t][k][v] = match jc {
                    Some(jc) if !stop => jc,
                    _ => js,
                };
            }
        }
    }
    out
}

/// E[τ] for one owner under truthful play and thresholds `kappa`.
pub fn expected_stopping_time(inst: &MarketInstance, sigma: &Sigma, kappa: &[ThresholdTable], owner: usize) -> f64 {
    let lattice = BudgetLattice::from_sigma(inst, sigma);
    let beliefs = build_beliefs(inst, sigma, &lattice, Some(kappa));
    beliefs.survival[owner][1..].iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrMargin {
    pub owner: usize,
    /// E_{f₀}[U₀] + b.
    pub ex_ante: f64,
    /// min over initial values of U₀, the binding participation constraint.
    pub worst_type: f64,
    pub worst_value: usize,
}

pub fn check_ir(inst: &MarketInstance, solution: &ValueSolution) -> Vec<IrMargin> {
    solution
        .owners
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u0 = &s.u[0][0];
            let f0 = &inst.kernel(i).initial;
            let ex_ante = f0.iter().zip(u0).map(|(p, u)| p * u).sum::<f64>() + inst.b;
            let (worst_value, worst_type) =
                u0.iter().copied().enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty grid");
            IrMargin { owner: i, ex_ante, worst_type, worst_value }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::market_core::{uniform_kernel, BudgetBinning, EpsilonGrid, OwnerSpec, ValueGrid};
    use crate::rent_and_payments::synthesize;
    use crate::stopping_solver::{solve_fixed_point, ReportSpace, Threshold};

    fn uniform_single(horizon: usize, grid: Vec<f64>, initial: Option<Vec<f64>>, b: f64) -> MarketInstance {
        let m = grid.len();
        let eps = EpsilonGrid::new(vec![0.2, 0.5]).unwrap();
        let bins = BudgetBinning::uniform(1, horizon, eps.cap()).unwrap();
        let owner = OwnerSpec {
            label: "u".into(),
            grid: ValueGrid::new(grid).unwrap(),
            kernel: uniform_kernel(m, horizon, 1, initial),
            budget: 0.0,
        };
        MarketInstance::new(horizon, vec![owner], 3.0, b, eps, bins, false).unwrap()
    }

    #[test]
    fn zero_payment_cost_is_accuracy_loss() {
        let inst = fixtures::two_owner_t1();
        let rules = MechanismRules::zero_payments(&inst, Sigma::constant(&inst, 1));
        let never = vec![ThresholdTable::never(&rules.lattice); 2];
        let c = direct_cost(&inst, &rules, &never).unwrap();
        assert_eq!(c.method, CostMethod::Exact);
        assert!((c.value - 2.0 * 3.0 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_period_cost() {
        let inst = uniform_single(0, vec![1.0, 2.0, 3.0], Some(vec![0.2, 0.5, 0.3]), 0.0);
        let sigma = Sigma { table: vec![vec![1, 0, 0, 0]] };
        let syn = synthesize(&inst, &sigma, &[vec![]]).unwrap();
        let c = direct_cost(&inst, &syn.rules, &syn.thresholds).unwrap().value;
        let f0 = &inst.kernel(0).initial;
        let oracle: f64 = (0..3)
            .map(|v| {
                let e = inst.eps.get(sigma.table[0][v]);
                f0[v] * (3.0 * (-e).exp() + syn.rules.theta[0][0][0][v] + syn.rules.rho[0][0])
            })
            .sum();
        assert!((c - oracle).abs() < 1e-12);
    }

    /// Explicit enumeration over both owners' two-period paths.
    #[test]
    fn two_owner_cost_matches_enumeration() {
        let inst = fixtures::two_owner_t1();
        let sigma = fixtures::two_owner_sigma(&inst);
        let syn = synthesize(&inst, &sigma, &vec![vec![Threshold::At(1)]; 2]).unwrap();
        let r = &syn.rules;
        let space = ReportSpace::new(&inst);
        let stops0 = |i: usize, v: usize| syn.thresholds[i].kl[0][0].admits(v);
        let mut oracle = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let p0 = inst.kernel(0).initial[a] * inst.kernel(1).initial[b];
                let c0 = space.encode(&[Some(a), Some(b)]);
                let e0 = inst.eps.get(r.sigma.table[0][c0]);
                let mut here = inst.l * (-e0).exp();
                for (i, v) in [(0, a), (1, b)] {
                    here += if stops0(i, v) { r.theta[i][0][0][c0] + r.rho[i][0] } else { r.beta[i][0][0][c0] };
                }
                oracle += p0 * here;
                let k1 = r.lattice.index(1, e0).unwrap();
                let bin = inst.bins.bin_of(e0);
                let ra = if stops0(0, a) { vec![(None, 1.0)] } else { (0..3).map(|x| (Some(x), inst.kernel(0).row(0, a, bin)[x])).collect() };
                let rb = if stops0(1, b) { vec![(None, 1.0)] } else { (0..3).map(|x| (Some(x), inst.kernel(1).row(0, b, bin)[x])).collect() };
                for &(xa, qa) in &ra {
                    for &(xb, qb) in &rb {
                        if xa.is_none() && xb.is_none() {
                            continue;
                        }
                        let c1 = space.encode(&[xa, xb]);
                        let e1 = inst.eps.get(r.sigma.table[1][c1]);
                        let mut later = inst.l * (-e1).exp();
                        for (i, x) in [(0, xa), (1, xb)] {
                            if x.is_some() {
                                later += r.theta[i][1][k1][c1] + r.rho[i][1];
                            }
                        }
                        oracle += p0 * qa * qb * later;
                    }
                }
            }
        }
        let c = direct_cost(&inst, r, &syn.thresholds).unwrap().value;
        assert!((c - oracle).abs() < 1e-12, "{c} vs {oracle}");
    }

    #[test]
    fn relaxed_cost_closed_form_for_iid_values() {
        let inst = uniform_single(2, vec![1.0, 2.0, 4.0], Some(vec![0.2, 0.5, 0.3]), 0.0);
        let sigma = Sigma::constant(&inst, 1);
        let lattice = BudgetLattice::from_sigma(&inst, &sigma);
        let rc = relaxed_cost(&inst, &sigma, &[ThresholdTable::never(&lattice)]).unwrap();
        let a = 0.5f64.exp_m1();
        let g = inst.grid(0);
        let f0 = &inst.kernel(0).initial;
        let mean0: f64 = f0.iter().zip(g.points()).map(|(p, x)| p * x).sum();
        let mean_later: f64 = g.points().iter().sum::<f64>() / 3.0;
        let w = g.cell_widths();
        let mut cdf = 0.0;
        // the top type has 1 − F₀ = 0 and drops out
        let virtual_term: f64 = (0..3)
            .map(|v| {
                cdf += f0[v];
                (1.0 - cdf) * w[v]
            })
            .sum();
        let oracle = 3.0 * 3.0 * (-0.5f64).exp() + a * (mean0 + 2.0 * mean_later) - a * virtual_term;
        assert!((rc - oracle).abs() < 1e-12, "{rc} vs {oracle}");
    }

    #[test]
    fn stopping_time_examples() {
        let inst = uniform_single(1, vec![1.0, 2.0], None, 0.0);
        let sigma = Sigma::constant(&inst, 0);
        let lat = BudgetLattice::from_sigma(&inst, &sigma);
        let t = |d: &[Threshold]| expected_stopping_time(&inst, &sigma, &[ThresholdTable::from_design(d, &lat)], 0);
        assert!((t(&[Threshold::Never]) - 1.0).abs() < 1e-12);
        assert!(t(&[Threshold::At(0)]).abs() < 1e-12);
        assert!((t(&[Threshold::At(1)]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn participation_examples() {
        let inst = uniform_single(2, vec![1.0, 2.0, 3.0], None, 0.0);
        let rules = MechanismRules::zero_payments(&inst, Sigma::constant(&inst, 1));
        let fp = solve_fixed_point(&inst, &rules).unwrap();
        let ir = check_ir(&inst, &fp.solution);
        assert!(ir[0].ex_ante < 0.0);
        assert_eq!(ir[0].worst_value, 2);
        let bound = 3.0 * 3.0 * 0.5f64.exp_m1();
        let rich = uniform_single(2, vec![1.0, 2.0, 3.0], None, bound + 1.0);
        let fp = solve_fixed_point(&rich, &rules).unwrap();
        assert!(check_ir(&rich, &fp.solution)[0].ex_ante >= 0.0);
        let syn = synthesize(&inst, &Sigma::separable(&inst, &[0, 1, 0]), &[vec![Threshold::At(1); 2]]).unwrap();
        assert!(check_ir(&inst, &syn.solution)[0].worst_type >= -1e-8);
    }

    #[test]
    fn policy_value_of_bellman_thresholds_is_u() {
        let inst = fixtures::constant_sigma_instance();
        let syn = synthesize(&inst, &Sigma::constant(&inst, 1), &[vec![Threshold::At(2); 2]]).unwrap();
        let model = OwnerModel::new(&inst, 0, &syn.rules.sigma, &syn.rules.lattice, &syn.beliefs);
        let j = threshold_policy_value(&model, &syn.rules, &syn.thresholds[0]);
        for (a, b) in j.iter().flatten().flatten().zip(syn.solution.owners[0].u.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
