//! Brute-force incentive verification: one-shot deviation gains, optimal
//! history-dependent deviations on small instances, and agreement between
//! Bellman stopping decisions and threshold rules.

use crate::error::{Error, Result};
use crate::market_core::MarketInstance;
use crate::stopping_solver::{branch_values, BeliefModel, MechanismRules, OwnerModel, ThresholdTable, ValueSolution};
use serde::{Deserialize, Serialize};

/// Largest instance for exhaustive multi-period search.
pub const DESK_MAX_HORIZON: usize = 3;
pub const DESK_MAX_GRID: usize = 4;
pub const DESK_MAX_OWNERS: usize = 2;
pub const GAIN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCell {
    pub owner: usize,
    pub t: usize,
    pub level: usize,
    pub v_true: usize,
    pub v_report: usize,
    /// Stop value with report `v_report` minus the truthful stop value.
    pub stop_gain: f64,
    /// Same for the continue branch; absent at the final period.
    pub cont_gain: Option<f64>,
    /// Best deviating branch minus the truthful value U.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPeriod {
    /// `[owner]` largest W − U over start states, W being the best deviation value.
    pub best_gain: Vec<f64>,
    pub max_gain: f64,
    /// Whether some multi-period strategy beats the best one-shot deviation.
    pub beats_one_shot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub cells: Vec<GainCell>,
    pub max_gain: f64,
    pub argmax: GainCell,
    pub max_stop_gain: f64,
    pub max_cont_gain: f64,
    pub multi_period: Option<MultiPeriod>,
}

/// Deviation at (t, k) with report `v_report`, truthful from t+1 on.
pub fn one_shot_deviation_gain(
    model: &OwnerModel,
    rules: &MechanismRules,
    solution: &ValueSolution,
    t: usize,
    k: usize,
    v_true: usize,
    v_report: usize,
) -> GainCell {
    let sol = &solution.owners[model.owner];
    let next = (t < model.horizon()).then(|| sol.u[t + 1].as_slice());
    let (js_dev, jc_dev) = branch_values(model, rules, next, t, k, v_true, v_report);
    let (js, jc) = branch_values(model, rules, next, t, k, v_true, v_true);
    let allowed = model.stop_allowed(t);
    let dev = match jc_dev {
        None => js_dev,
        Some(c) if allowed => js_dev.max(c),
        Some(c) => c,
    };
    GainCell {
        owner: model.owner,
        t,
        level: k,
        v_true,
        v_report,
        stop_gain: js_dev - js,
        cont_gain: jc_dev.zip(jc).map(|(d, c)| d - c),
        combined: dev - sol.u[t][k][v_true],
    }
}

fn check_desk_scale(inst: &MarketInstance) -> Result<()> {
    let grid = (0..inst.n()).map(|i| inst.grid(i).len()).max().unwrap_or(0);
    if inst.horizon > DESK_MAX_HORIZON || grid > DESK_MAX_GRID || inst.n() > DESK_MAX_OWNERS {
        return Err(Error::Capacity(format!(
            "exhaustive deviation search supports T <= {DESK_MAX_HORIZON}, grid <= {DESK_MAX_GRID}, n <= {DESK_MAX_OWNERS}; got T = {}, grid = {grid}, n = {}",
            inst.horizon,
            inst.n()
        )));
    }
    Ok(())
}

/// Best value over every deterministic history-dependent (report, stop)
/// strategy from node (t, k, v), by depth-first search of the history tree.
fn best_strategy_value(model: &OwnerModel, rules: &MechanismRules, t: usize, k: usize, v: usize) -> f64 {
    let horizon = model.horizon();
    let m = model.m();
    let allowed = model.stop_allowed(t);
    let mut best = f64::NEG_INFINITY;
    for r in 0..m {
        // stop branch with no recursion; continue branch explores the subtree
        let (js, _) = branch_values(model, rules, None, t, k, v, r);
        if allowed || t == horizon {
            best = best.max(js);
        }
        if t == horizon {
            continue;
        }
        let i = model.owner;
        let x = model.value(v);
        let mut jc = 0.0;
        for &(partial, pr) in model.others(t) {
            let cell = model.cell(partial, r);
            let e = model.eps_index(t, cell);
            let (k2, bin) = model.step(t, k, e);
            let mut cont = 0.0;
            for (v2, &q) in model.row(t, v, bin).iter().enumerate() {
                if q > 0.0 {
                    cont += q * best_strategy_value(model, rules, t + 1, k2, v2);
                }
            }
            jc += pr * (-crate::market_core::flow_loss(x, model.inst.eps.get(e)) + rules.beta[i][t][k][cell] + cont);
        }
        best = best.max(jc);
    }
    best
}

/// W − U per `[t][level][v]` for one owner.
pub fn multi_period_gains(model: &OwnerModel, rules: &MechanismRules, solution: &ValueSolution) -> Result<Vec<Vec<Vec<f64>>>> {
    check_desk_scale(model.inst)?;
    let u = &solution.owners[model.owner].u;
    Ok((0..=model.horizon())
        .map(|t| {
            (0..model.lattice.len(t))
                .map(|k| (0..model.m()).map(|v| best_strategy_value(model, rules, t, k, v) - u[t][k][v]).collect())
                .collect()
        })
        .collect())
}

/// Fills the one-shot table; with `multi_period`, also the exhaustive search.
pub fn max_deviation_gain(
    inst: &MarketInstance,
    rules: &MechanismRules,
    beliefs: &BeliefModel,
    solution: &ValueSolution,
    multi_period: bool,
) -> Result<DeviationReport> {
    if multi_period {
        check_desk_scale(inst)?;
    }
    let mut cells = Vec::new();
    let mut multi = Vec::new();
    for i in 0..inst.n() {
        let model = OwnerModel::new(inst, i, &rules.sigma, &rules.lattice, beliefs);
        for t in 0..=inst.horizon {
            for k in 0..rules.lattice.len(t) {
                for v in 0..model.m() {
                    for r in 0..model.m() {
                        cells.push(one_shot_deviation_gain(&model, rules, solution, t, k, v, r));
                    }
                }
            }
        }
        if multi_period {
            let w = multi_period_gains(&model, rules, solution)?;
            multi.push(w.iter().flatten().flatten().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let argmax = *cells
        .iter()
        .max_by(|a, b| a.combined.total_cmp(&b.combined))
        .ok_or_else(|| Error::Structural("empty deviation table".into()))?;
    let max_stop_gain = cells.iter().map(|c| c.stop_gain).fold(f64::NEG_INFINITY, f64::max);
    let max_cont_gain = cells.iter().filter_map(|c| c.cont_gain).fold(0.0, f64::max);
    let multi_period = multi_period.then(|| {
        let max_gain = multi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        MultiPeriod { beats_one_shot: max_gain > argmax.combined + GAIN_TOL, best_gain: multi, max_gain }
    });
    Ok(DeviationReport { max_gain: argmax.combined, argmax, max_stop_gain, max_cont_gain, multi_period, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotPrinciple {
    pub holds: bool,
    pub one_shot_gain: f64,
    pub multi_period_gain: f64,
    /// Multi-period best minus one-shot best.
    pub gap: f64,
}

pub fn verify_one_shot_principle(
    inst: &MarketInstance,
    rules: &MechanismRules,
    beliefs: &BeliefModel,
    solution: &ValueSolution,
) -> Result<OneShotPrinciple> {
    let rep = max_deviation_gain(inst, rules, beliefs, solution, true)?;
    let multi = rep.multi_period.expect("requested").max_gain;
    let gap = multi - rep.max_gain;
    Ok(OneShotPrinciple { holds: gap <= GAIN_TOL, one_shot_gain: rep.max_gain, multi_period_gain: multi, gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMismatch {
    pub owner: usize,
    pub t: usize,
    pub level: usize,
    pub v: usize,
    pub bellman_stop: bool,
    pub g: f64,
    pub rho: f64,
}

/// Every (owner, t, level, v) where the Bellman decision differs from the up-set rule of κˡ.
pub fn verify_threshold_optimality(solution: &ValueSolution, thresholds: &[ThresholdTable]) -> Vec<ThresholdMismatch> {
    let mut out = Vec::new();
    for (i, (sol, th)) in solution.owners.iter().zip(thresholds).enumerate() {
        for t in 0..sol.stop.len() {
            for k in 0..sol.stop[t].len() {
                for (v, &stop) in sol.stop[t][k].iter().enumerate() {
                    if stop != th.kl[t][k].admits(v) {
                        out.push(ThresholdMismatch { owner: i, t, level: k, v, bellman_stop: stop, g: sol.g[t][k][v], rho: sol.rho[t] });
                    }
                }
            }
        }
    }
    out
}
