use super::envelope::RentTable;
use crate::error::{Error, Result};
use crate::market_core::{flow_loss, MarketInstance};
use crate::stopping_solver::{
    build_beliefs, extract_thresholds, solve_value_function, BeliefModel, MechanismRules, OwnerModel, ReportSpace,
    Sigma, Threshold, ThresholdTable, ValueSolution, MAX_FIXED_POINT_ITERS,
};
use serde::{Deserialize, Serialize};

type Tab3 = Vec<Vec<Vec<f64>>>;

/// Cells in which the owner's own digit is "departed" carry zero payment.
fn own_report(model: &OwnerModel, space: &ReportSpace, cell: usize) -> Option<usize> {
    let d = space.digit(cell, model.owner);
    (d != space.departed(model.owner)).then_some(d)
}

/// θ_t(v, v_{−i}) = Λ(v, v̄; t) + ℓ(v, σ_t) over `[t][level][cell]`.
pub fn synthesize_theta(model: &OwnerModel, rents: &RentTable) -> Tab3 {
    let space = ReportSpace::new(model.inst);
    (0..=model.horizon())
        .map(|t| {
            (0..model.lattice.len(t))
                .map(|k| {
                    (0..space.cells())
                        .map(|cell| match own_report(model, &space, cell) {
                            Some(v) => rents.rent_to_top(t, k, v, t) + flow_loss(model.value(v), model.eps(t, cell)),
                            None => 0.0,
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// β_t(v, v_{−i}) = S_t(v) − E[S_{t+1}(ṽ) | v, bin] + ℓ(v, σ_t), S being the sup-over-τ rent.
pub fn synthesize_beta(model: &OwnerModel, rents: &RentTable) -> Tab3 {
    let space = ReportSpace::new(model.inst);
    let horizon = model.horizon();
    (0..=horizon)
        .map(|t| {
            (0..model.lattice.len(t))
                .map(|k| {
                    (0..space.cells())
                        .map(|cell| {
                            let Some(v) = own_report(model, &space, cell) else { return 0.0 };
                            let e = model.eps_index(t, cell);
                            let mut beta = rents.sup_rent(t, k, v) + flow_loss(model.value(v), model.inst.eps.get(e));
                            if t < horizon {
                                let (k2, bin) = model.step(t, k, e);
                                let next: f64 = model
                                    .row(t, v, bin)
                                    .iter()
                                    .enumerate()
                                    .map(|(v2, p)| p * rents.sup_rent(t + 1, k2, v2))
                                    .sum();
                                beta -= next;
                            }
                            beta
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Expected telescoping sum of the ρ bracket from (t, k) started at `start`,
/// realized values capped by `cap(s, level)` from s = t+1 on.
fn capped_rho_sum(
    model: &OwnerModel,
    rents: &RentTable,
    t: usize,
    k: usize,
    start: usize,
    cap: &dyn Fn(usize, usize) -> usize,
) -> f64 {
    let horizon = model.horizon();
    let m = model.m();
    let gap = |s: usize, kk: usize, c: usize| rents.rent_to_top(s, kk, c, s) - rents.sup_rent(s, kk, c);
    // dist[level][uncapped v], with the capped value at s = t being `start`
    let mut dist = vec![vec![0.0; m]; model.lattice.len(t)];
    dist[k][start] = 1.0;
    let mut total = 0.0;
    for s in t..horizon {
        let mut next = vec![vec![0.0; m]; model.lattice.len(s + 1)];
        for (kk, row) in dist.iter().enumerate() {
            for (v, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let c = if s == t { start } else { v.min(cap(s, kk)) };
                let here = gap(s, kk, c);
                for &(partial, pr) in model.others(s) {
                    let cell = model.cell(partial, v);
                    let (k2, bin) = model.step(s, kk, model.eps_index(s, cell));
                    for (v2, &q) in model.row(s, v, bin).iter().enumerate() {
                        if q == 0.0 {
                            continue;
                        }
                        let w = p * pr * q;
                        let c2 = v2.min(cap(s + 1, k2));
                        total += w * (gap(s + 1, k2, c2) - here);
                        next[k2][v2] += w;
                    }
                }
            }
        }
        dist = next;
    }
    total
}

fn rho_at(model: &OwnerModel, rents: &RentTable, t: usize, start: &dyn Fn(usize) -> usize, cap: &dyn Fn(usize, usize) -> usize) -> f64 {
    let w = &model.beliefs.level_dist[model.owner][t];
    (0..model.lattice.len(t))
        .filter(|&k| w[k] > 0.0)
        .map(|k| w[k] * capped_rho_sum(model, rents, t, k, start(k), cap))
        .sum()
}

/// ρ(t) from the κ-capped process, weighted by the law of the budget level.
/// A "never" threshold is an error; see [`synthesize_rho_capped`].
pub fn synthesize_rho(model: &OwnerModel, rents: &RentTable, kappa: &ThresholdTable) -> Result<Vec<f64>> {
    for t in 0..model.horizon() {
        if kappa.kl[t].contains(&Threshold::Never) {
            return Err(Error::RhoUndefined { owner: model.owner, t });
        }
    }
    Ok(synthesize_rho_capped(model, rents, kappa).0)
}

/// As [`synthesize_rho`], starting "never" thresholds at v̄; returns the warnings issued.
pub fn synthesize_rho_capped(model: &OwnerModel, rents: &RentTable, kappa: &ThresholdTable) -> (Vec<f64>, Vec<String>) {
    let top = model.m() - 1;
    let horizon = model.horizon();
    let mut warnings = Vec::new();
    for t in 0..horizon {
        if kappa.kl[t].contains(&Threshold::Never) {
            warnings.push(format!("owner {}: rho at t={t} uses the top value for a never-stop threshold", model.owner));
        }
    }
    let cap = |s: usize, kk: usize| kappa.kl[s][kk].cap_index(top);
    let mut rho: Vec<f64> = (0..horizon).map(|t| rho_at(model, rents, t, &|k| cap(t, k), &cap)).collect();
    rho.push(0.0);
    (rho, warnings)
}

/// Per-period thresholds with zero ρ, solved backward from T. `None` marks a
/// period where the expression has no root on the grid.
pub fn zero_rho_threshold_solve(model: &OwnerModel, rents: &RentTable) -> Vec<Option<Threshold>> {
    const ROOT_TOL: f64 = 1e-10;
    let horizon = model.horizon();
    let m = model.m();
    let top = m - 1;
    let mut kappa: Vec<Option<Threshold>> = vec![None; horizon + 1];
    kappa[horizon] = Some(Threshold::At(0));
    for t in (0..horizon).rev() {
        let solved = kappa.clone();
        let cap = move |s: usize, _k: usize| solved[s].unwrap_or(Threshold::Never).cap_index(top);
        let expr: Vec<f64> = (0..m).map(|v| rho_at(model, rents, t, &|_| v, &cap)).collect();
        kappa[t] = if let Some(v) = expr.iter().position(|e| e.abs() <= ROOT_TOL) {
            Some(Threshold::At(v))
        } else {
            (0..m - 1)
                .find(|&v| expr[v].signum() != expr[v + 1].signum())
                .map(|v| Threshold::At(if expr[v].abs() <= expr[v + 1].abs() { v } else { v + 1 }))
        };
    }
    kappa
}

/// Synthesized rules together with the equilibrium they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub rules: MechanismRules,
    pub design: Vec<ThresholdTable>,
    pub beliefs: BeliefModel,
    pub rents: Vec<RentTable>,
    pub solution: ValueSolution,
    /// Emergent thresholds of the solved stopping problems.
    pub thresholds: Vec<ThresholdTable>,
    pub warnings: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
}

fn build_rules(
    inst: &MarketInstance,
    sigma: &Sigma,
    beliefs: &BeliefModel,
    design: &[ThresholdTable],
) -> Result<(MechanismRules, Vec<RentTable>, Vec<String>)> {
    let mut rules = MechanismRules::zero_payments(inst, sigma.clone());
    let mut rents = Vec::with_capacity(inst.n());
    let mut warnings = Vec::new();
    for i in 0..inst.n() {
        let model = OwnerModel::new(inst, i, &rules.sigma, &rules.lattice, beliefs);
        let table = RentTable::build(&model)?;
        let theta = synthesize_theta(&model, &table);
        let beta = synthesize_beta(&model, &table);
        let (rho, w) = synthesize_rho_capped(&model, &table, &design[i]);
        rules.theta[i] = theta;
        rules.beta[i] = beta;
        rules.rho[i] = rho;
        warnings.extend(w);
        rents.push(table);
    }
    Ok((rules, rents, warnings))
}

/// Synthesizes β, θ and ρ for σ and per-owner threshold designs (one entry
/// per period), iterating beliefs and emergent thresholds to a fixed point.
pub fn synthesize(inst: &MarketInstance, sigma: &Sigma, design: &[Vec<Threshold>]) -> Result<Synthesis> {
    sigma.check(inst)?;
    if design.len() != inst.n() || design.iter().any(|d| d.len() < inst.horizon) {
        return Err(Error::Structural("threshold design needs one entry per owner and period".into()));
    }
    let lattice = crate::stopping_solver::BudgetLattice::from_sigma(inst, sigma);
    let design: Vec<ThresholdTable> = design.iter().map(|d| ThresholdTable::from_design(d, &lattice)).collect();
    let mut current = design.clone();
    for it in 1..=MAX_FIXED_POINT_ITERS {
        let beliefs = build_beliefs(inst, sigma, &lattice, Some(&current));
        let (rules, rents, mut warnings) = build_rules(inst, sigma, &beliefs, &design)?;
        let solution = solve_value_function(inst, &rules, &beliefs)?;
        let ex: Vec<_> = (0..inst.n()).map(|i| extract_thresholds(&solution, i)).collect();
        let tables: Vec<ThresholdTable> = ex.iter().map(|e| e.table.clone()).collect();
        let converged = tables == current;
        if converged || it == MAX_FIXED_POINT_ITERS {
            for (i, e) in ex.iter().enumerate() {
                for (t, k) in &e.non_threshold {
                    warnings.push(format!("owner {i}: stopping region at t={t}, level {k} is not an up-set"));
                }
            }
            if !converged {
                warnings.push(format!("belief/threshold iteration did not converge in {MAX_FIXED_POINT_ITERS} rounds"));
            }
            return Ok(Synthesis {
                rules,
                design,
                beliefs,
                rents,
                solution,
                thresholds: tables,
                warnings,
                iterations: it,
                converged,
            });
        }
        current = tables;
    }
    unreachable!()
}
