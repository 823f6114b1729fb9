use super::envelope::RentTable;
use super::synthesis::{synthesize, Synthesis};
use crate::error::Result;
use crate::market_core::{flow_loss, MarketInstance};
use crate::stopping_solver::{branch_values, MechanismRules, OwnerModel, OwnerSolution, Sigma, Threshold};
use serde::{Deserialize, Serialize};

pub const MARGIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellArg {
    pub owner: usize,
    pub t: usize,
    pub level: usize,
    pub v: usize,
    pub v_hat: usize,
    pub cell: usize,
}

/// Worst margins of one owner in one period; C2 is absent at the final period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMargins {
    pub owner: usize,
    pub t: usize,
    pub c1: f64,
    pub c1_arg: CellArg,
    pub c2: Option<f64>,
    pub c2_arg: Option<CellArg>,
    /// Worst margins after averaging over the others' reports.
    pub c1_expected: f64,
    pub c2_expected: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    Sufficient,
    Necessary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub kind: ConditionKind,
    pub periods: Vec<PeriodMargins>,
    pub min_c1: f64,
    pub min_c2: f64,
    /// Largest gap between the anchored rent Λ(v̂, v; t) and the rent difference.
    pub rent_discrepancy: f64,
    pub passes: bool,
}

/// Value of the owner's problem when it stops as early as possible
/// (forced at T, gating respected); pairs with U as the other extreme policy.
pub fn min_policy_values(model: &OwnerModel, rules: &MechanismRules) -> Vec<Vec<Vec<f64>>> {
    let horizon = model.horizon();
    let m = model.m();
    let mut out: Vec<Vec<Vec<f64>>> = (0..=horizon).map(|t| vec![vec![0.0; m]; model.lattice.len(t)]).collect();
    for t in (0..=horizon).rev() {
        let (head, tail) = out.split_at_mut(t + 1);
        let next = tail.first().map(|n| n.as_slice());
        for k in 0..model.lattice.len(t) {
            for v in 0..m {
                let (js, jc) = branch_values(model, rules, next, t, k, v, v);
                head[t][k][v] = match jc {
                    None => js,
                    Some(jc) if model.stop_allowed(t) => js.min(jc),
                    Some(jc) => jc,
                };
            }
        }
    }
    out
}

struct Tables<'a> {
    model: OwnerModel<'a>,
    rents: &'a RentTable,
    sol: &'a OwnerSolution,
    umin: Vec<Vec<Vec<f64>>>,
    rho: &'a [f64],
}

impl Tables<'_> {
    fn sup_rho_from(&self, t: usize) -> f64 {
        self.rho[t..].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Σ_{v'} (P(v'|v̂) − P(v'|v)) U_{t+1}(v'), choosing per v' the policy
    /// value that minimizes (`favour_max = false`) or maximizes the sum.
    fn continuation_shift(&self, t: usize, k2: usize, bin: usize, v: usize, v_hat: usize, favour_max: bool) -> f64 {
        let hi = &self.sol.u[t + 1][k2];
        let lo = &self.umin[t + 1][k2];
        let p_hat = self.model.row(t, v_hat, bin);
        let p = self.model.row(t, v, bin);
        (0..p.len())
            .map(|j| {
                let mu = p_hat[j] - p[j];
                let pick_hi = (mu > 0.0) == favour_max;
                mu * if pick_hi { hi[j] } else { lo[j] }
            })
            .sum()
    }
}

fn margins_for_owner(tab: &Tables, kind: ConditionKind, out: &mut Vec<PeriodMargins>, discrepancy: &mut f64) -> Result<()> {
    let model = &tab.model;
    let horizon = model.horizon();
    let m = model.m();
    for t in 0..=horizon {
        let mut c1 = (f64::INFINITY, None);
        let mut c2 = (f64::INFINITY, None);
        let mut c1e = f64::INFINITY;
        let mut c2e = f64::INFINITY;
        let sup_rho = tab.sup_rho_from(t);
        for k in 0..model.lattice.len(t) {
            for v in 0..m {
                for v_hat in 0..m {
                    let anchored = tab.rents.rent_between(t, k, v_hat, v, t)?;
                    let diff = tab.rents.rent_to_top(t, k, v_hat, t) - tab.rents.rent_to_top(t, k, v, t);
                    *discrepancy = discrepancy.max((anchored - diff).abs());
                    let rent_c1 = match kind {
                        ConditionKind::Sufficient => anchored,
                        ConditionKind::Necessary => diff,
                    };
                    let sup_gap = tab.rents.sup_rent(t, k, v_hat) - tab.rents.sup_rent(t, k, v);
                    let (mut e1, mut e2) = (0.0, 0.0);
                    for &(partial, pr) in model.others(t) {
                        let cell = model.cell(partial, v_hat);
                        let e = model.eps_index(t, cell);
                        let eps = model.inst.eps.get(e);
                        let d_s = flow_loss(model.value(v), eps) - flow_loss(model.value(v_hat), eps);
                        let m1 = d_s - rent_c1;
                        let arg = CellArg { owner: model.owner, t, level: k, v, v_hat, cell };
                        if m1 < c1.0 {
                            c1 = (m1, Some(arg));
                        }
                        e1 += pr * m1;
                        if t < horizon {
                            let (k2, bin) = model.step(t, k, e);
                            let m2 = match kind {
                                ConditionKind::Sufficient => {
                                    d_s + tab.continuation_shift(t, k2, bin, v, v_hat, false) - sup_rho - sup_gap
                                }
                                ConditionKind::Necessary => d_s + tab.continuation_shift(t, k2, bin, v, v_hat, true) - sup_gap,
                            };
                            if m2 < c2.0 {
                                c2 = (m2, Some(arg));
                            }
                            e2 += pr * m2;
                        }
                    }
                    c1e = c1e.min(e1);
                    if t < horizon {
                        c2e = c2e.min(e2);
                    }
                }
            }
        }
        out.push(PeriodMargins {
            owner: model.owner,
            t,
            c1: c1.0,
            c1_arg: c1.1.expect("nonempty grid"),
            c2: (t < horizon).then_some(c2.0),
            c2_arg: c2.1,
            c1_expected: c1e,
            c2_expected: (t < horizon).then_some(c2e),
        });
    }
    Ok(())
}

fn check(inst: &MarketInstance, syn: &Synthesis, kind: ConditionKind) -> Result<MarginReport> {
    let mut periods = Vec::new();
    let mut discrepancy: f64 = 0.0;
    for i in 0..inst.n() {
        let model = OwnerModel::new(inst, i, &syn.rules.sigma, &syn.rules.lattice, &syn.beliefs);
        let umin = min_policy_values(&model, &syn.rules);
        let tab = Tables { model, rents: &syn.rents[i], sol: &syn.solution.owners[i], umin, rho: &syn.rules.rho[i] };
        margins_for_owner(&tab, kind, &mut periods, &mut discrepancy)?;
    }
    let min_c1 = periods.iter().map(|p| p.c1).fold(f64::INFINITY, f64::min);
    let min_c2 = periods.iter().filter_map(|p| p.c2).fold(f64::INFINITY, f64::min);
    Ok(MarginReport {
        kind,
        passes: min_c1 >= -MARGIN_TOL && min_c2 >= -MARGIN_TOL,
        periods,
        min_c1,
        min_c2,
        rent_discrepancy: discrepancy,
    })
}

/// Worst-case sufficient-condition margins over every (owner, t, level, v, v̂, cell).
pub fn check_sufficient(inst: &MarketInstance, syn: &Synthesis) -> Result<MarginReport> {
    check(inst, syn, ConditionKind::Sufficient)
}

pub fn check_necessary(inst: &MarketInstance, syn: &Synthesis) -> Result<MarginReport> {
    check(inst, syn, ConditionKind::Necessary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodDelta {
    pub owner: usize,
    pub t: usize,
    pub delta_s: f64,
    pub delta_not_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Dic,
    ApproxDic { delta_s: f64, delta_not_s: f64 },
    ViolatedConditions { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicCertificate {
    pub periods: Vec<PeriodDelta>,
    pub delta_s: f64,
    pub delta_not_s: f64,
    pub verdict: Verdict,
}

/// Stop-side and continue-side slacks bounding any one-shot deviation gain.
pub fn delta_dic_certificate(inst: &MarketInstance, syn: &Synthesis) -> Result<DicCertificate> {
    let mut periods = Vec::new();
    for i in 0..inst.n() {
        let model = OwnerModel::new(inst, i, &syn.rules.sigma, &syn.rules.lattice, &syn.beliefs);
        let rents = &syn.rents[i];
        let u = &syn.solution.owners[i].u;
        let rho = &syn.rules.rho[i];
        let horizon = model.horizon();
        let m = model.m();
        // J without β at t for true value x and report v̂ in cell
        let jbar = |t: usize, k: usize, x: usize, cell: usize| -> f64 {
            let e = model.eps_index(t, cell);
            let (k2, bin) = model.step(t, k, e);
            let cont: f64 = model.row(t, x, bin).iter().zip(&u[t + 1][k2]).map(|(p, w)| p * w).sum();
            -flow_loss(model.value(x), model.inst.eps.get(e)) + cont
        };
        for t in 0..=horizon {
            let sup_rho = rho[t..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut ds = f64::NEG_INFINITY;
            let mut dn = f64::NEG_INFINITY;
            for k in 0..model.lattice.len(t) {
                for v in 0..m {
                    for v_hat in 0..m {
                        let rent = rents.rent_between(t, k, v_hat, v, t)?;
                        let sup_gap = rents.sup_rent(t, k, v_hat) - rents.sup_rent(t, k, v);
                        for &(partial, _) in model.others(t) {
                            let cell = model.cell(partial, v_hat);
                            let eps = model.eps(t, cell);
                            ds = ds.max(flow_loss(model.value(v_hat), eps) - flow_loss(model.value(v), eps) + rent);
                            if t < horizon {
                                dn = dn.max(jbar(t, k, v, cell) - jbar(t, k, v_hat, cell) + sup_gap);
                            }
                        }
                    }
                }
            }
            let delta_not_s = if t < horizon { dn + sup_rho } else { sup_rho };
            periods.push(PeriodDelta { owner: i, t, delta_s: ds, delta_not_s });
        }
    }
    let delta_s = periods.iter().map(|p| p.delta_s).fold(f64::NEG_INFINITY, f64::max);
    let delta_not_s = periods.iter().map(|p| p.delta_not_s).fold(f64::NEG_INFINITY, f64::max);
    let verdict = if !inst.kernels_valid() {
        Verdict::ViolatedConditions { reason: "a transition kernel fails first-order stochastic dominance or normalization".into() }
    } else if delta_s <= MARGIN_TOL && delta_not_s <= MARGIN_TOL {
        Verdict::Dic
    } else {
        Verdict::ApproxDic { delta_s, delta_not_s }
    };
    Ok(DicCertificate { periods, delta_s, delta_not_s, verdict })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "kebab-case")]
pub enum StoppingTarget {
    RetainUntilEnd,
    ForceStopAt { t: usize },
}

impl StoppingTarget {
    /// Threshold sequence realizing the target: never before the stop period, v̲ from it on.
    pub fn design(self, horizon: usize) -> Vec<Threshold> {
        (0..=horizon)
            .map(|s| match self {
                StoppingTarget::RetainUntilEnd => Threshold::Never,
                StoppingTarget::ForceStopAt { t } if s < t => Threshold::Never,
                StoppingTarget::ForceStopAt { .. } => Threshold::At(0),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCheck {
    pub index: usize,
    pub min_c1: f64,
    pub min_c2: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub owner: usize,
    pub target: StoppingTarget,
    pub candidates: Vec<CandidateCheck>,
    pub feasible: bool,
}

/// Exhaustive scan of `family` for a σ whose synthesized rules meet the
/// sufficient conditions under the target's thresholds for `owner`; the
/// other owners are designed never to stop.
pub fn stopping_control_feasibility(
    inst: &MarketInstance,
    owner: usize,
    target: StoppingTarget,
    family: &[Sigma],
) -> Result<FeasibilityReport> {
    let mut design = vec![vec![Threshold::Never; inst.horizon + 1]; inst.n()];
    design[owner] = target.design(inst.horizon);
    let mut candidates = Vec::with_capacity(family.len());
    for (index, sigma) in family.iter().enumerate() {
        let syn = synthesize(inst, sigma, &design)?;
        let rep = check_sufficient(inst, &syn)?;
        candidates.push(CandidateCheck { index, min_c1: rep.min_c1, min_c2: rep.min_c2, passes: rep.passes });
    }
    let feasible = candidates.iter().any(|c| c.passes);
    Ok(FeasibilityReport { owner, target, candidates, feasible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dic_oracle::max_deviation_gain;
    use crate::fixtures;
    use crate::stopping_solver::{solve_fixed_point, MechanismRules};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant() -> (MarketInstance, Synthesis) {
        let inst = fixtures::constant_sigma_instance();
        let syn = synthesize(&inst, &Sigma::constant(&inst, 1), &[vec![Threshold::At(2), Threshold::At(1)]]).unwrap();
        (inst, syn)
    }

    #[test]
    fn constant_sigma_margins_vanish() {
        let (inst, syn) = constant();
        let suf = check_sufficient(&inst, &syn).unwrap();
        assert!(suf.min_c1.abs() < 1e-10);
        assert!(suf.rent_discrepancy < 1e-10);
        assert!(suf.passes);
        let nec = check_necessary(&inst, &syn).unwrap();
        assert!(nec.min_c1.abs() < 1e-10);
        assert!(nec.passes);
        assert!(suf.periods.iter().all(|p| p.c2.is_some() == (p.t < inst.horizon)));
    }

    #[test]
    fn adversarial_sigma_has_negative_margin() {
        let inst = fixtures::adversarial_instance();
        let sigma = fixtures::adversarial_sigma(&inst);
        let syn = synthesize(&inst, &sigma, &[vec![Threshold::At(1)]]).unwrap();
        let suf = check_sufficient(&inst, &syn).unwrap();
        assert!(!suf.passes);
        assert!(suf.min_c2 < -0.1);
        // without compensation the oracle finds the profitable misreport
        let zero = MechanismRules::zero_payments(&inst, sigma);
        let fp = solve_fixed_point(&inst, &zero).unwrap();
        let rep = max_deviation_gain(&inst, &zero, &fp.beliefs, &fp.solution, false).unwrap();
        assert!(rep.max_gain > 0.1);
        let cert = delta_dic_certificate(&inst, &syn).unwrap();
        assert!(cert.delta_s >= 0.0);
        let dev = max_deviation_gain(&inst, &syn.rules, &syn.beliefs, &syn.solution, false).unwrap();
        assert!(dev.max_stop_gain <= cert.delta_s + 1e-8);
        assert!(dev.max_cont_gain <= cert.delta_not_s + 1e-8);
    }

    #[test]
    fn sufficient_implies_necessary() {
        for seed in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = if seed % 2 == 0 {
                fixtures::random_iid_owner(&mut rng, 2, 3)
            } else {
                fixtures::random_single_owner(&mut rng, 2, 3)
            };
            let sigma = fixtures::random_monotone_sigma(&mut rng, &inst);
            let design = fixtures::random_design(&mut rng, &inst);
            let syn = synthesize(&inst, &sigma, &[design]).unwrap();
            if check_sufficient(&inst, &syn).unwrap().passes {
                assert!(check_necessary(&inst, &syn).unwrap().passes, "seed {seed}");
            }
        }
    }

    #[test]
    fn certificate_examples() {
        let (inst, syn) = constant();
        let cert = delta_dic_certificate(&inst, &syn).unwrap();
        assert!(cert.delta_s.abs() < 1e-10);
        assert!(cert.delta_not_s.abs() < 1e-10);
        assert_eq!(cert.verdict, Verdict::Dic);
        let s = r#"{"horizon": 1, "epsilon_grid": [0.2, 0.4], "budget_bins": 1, "L": 1.0, "degenerate_test_mode": true,
                   "owners": [{"grid": [2.0], "kernel": {"generator": "uniform"}}]}"#;
        let one = MarketInstance::from_json_str(s).unwrap();
        let syn = synthesize(&one, &Sigma::separable(&one, &[0, 1]), &[vec![Threshold::At(0)]]).unwrap();
        let cert = delta_dic_certificate(&one, &syn).unwrap();
        assert_eq!(cert.delta_s, 0.0);
        let sup_rho = syn.rules.rho[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((cert.delta_not_s - sup_rho).abs() < 1e-12);
    }

    #[test]
    fn broken_kernel_voids_the_certificate() {
        let mut inst = fixtures::constant_sigma_instance();
        inst.owners[0].kernel.transitions[0][3][0] = vec![0.7, 0.1, 0.1, 0.1];
        let syn = synthesize(&inst, &Sigma::constant(&inst, 0), &[vec![Threshold::Never; 2]]).unwrap();
        let cert = delta_dic_certificate(&inst, &syn).unwrap();
        assert!(matches!(cert.verdict, Verdict::ViolatedConditions { .. }));
    }

    #[test]
    fn stopping_control() {
        let inst = fixtures::constant_sigma_instance();
        let family = vec![Sigma::constant(&inst, 0)];
        let rep = stopping_control_feasibility(&inst, 0, StoppingTarget::RetainUntilEnd, &family).unwrap();
        let direct = synthesize(&inst, &family[0], &[vec![Threshold::Never; 3]]).unwrap();
        assert_eq!(rep.feasible, check_sufficient(&inst, &direct).unwrap().passes);
        let design = StoppingTarget::ForceStopAt { t: 0 }.design(2);
        assert_eq!(design[0], Threshold::At(0));
        assert_eq!(StoppingTarget::RetainUntilEnd.design(2)[..2], [Threshold::Never, Threshold::Never]);

        let adv = fixtures::adversarial_instance();
        let family = vec![fixtures::adversarial_sigma(&adv)];
        let rep = stopping_control_feasibility(&adv, 0, StoppingTarget::ForceStopAt { t: 0 }, &family).unwrap();
        assert!(!rep.feasible);
        assert_eq!(rep.candidates.len(), 1);
    }

    #[test]
    fn min_policy_is_below_optimal() {
        let (inst, syn) = constant();
        let model = OwnerModel::new(&inst, 0, &syn.rules.sigma, &syn.rules.lattice, &syn.beliefs);
        let umin = min_policy_values(&model, &syn.rules);
        for (a, b) in umin.iter().flatten().flatten().zip(syn.solution.owners[0].u.iter().flatten().flatten()) {
            assert!(*a <= b + 1e-12);
        }
    }
}
