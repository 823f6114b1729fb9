use super::beliefs::{build_beliefs, BeliefModel, OwnerModel};
use super::rules::{MechanismRules, Threshold, ThresholdTable};
use crate::error::{Error, Result};
use crate::market_core::{flow_loss, MarketInstance};
use serde::{Deserialize, Serialize};

/// Indifference tolerance; ties resolve to continuing.
pub const TIE_TOL: f64 = 1e-9;
pub const MAX_FIXED_POINT_ITERS: usize = 50;

type Tab3 = Vec<Vec<Vec<f64>>>;

/// Backward-induction output for one owner, indexed `[t][level][v]`.
/// `j_cont` and `g` are NaN at t = T where continuing is impossible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerSolution {
    pub u: Tab3,
    pub j_stop: Tab3,
    pub j_cont: Tab3,
    pub g: Tab3,
    pub stop: Vec<Vec<Vec<bool>>>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub owners: Vec<OwnerSolution>,
}

/// Stop and continue values at (t, k) for true value `v_true` and report
/// `v_report`; `u_next` is U at t+1 indexed `[level][v]`.
pub fn branch_values(
    model: &OwnerModel,
    rules: &MechanismRules,
    u_next: Option<&[Vec<f64>]>,
    t: usize,
    k: usize,
    v_true: usize,
    v_report: usize,
) -> (f64, Option<f64>) {
    let i = model.owner;
    let x = model.value(v_true);
    let rho = rules.rho[i][t];
    let mut j_stop = 0.0;
    let mut j_cont = 0.0;
    for &(partial, pr) in model.others(t) {
        let cell = model.cell(partial, v_report);
        let e = model.eps_index(t, cell);
        let loss = flow_loss(x, model.inst.eps.get(e));
        j_stop += pr * (-loss + rules.theta[i][t][k][cell] + rho);
        if let Some(un) = u_next {
            let (k2, bin) = model.step(t, k, e);
            let row = model.row(t, v_true, bin);
            let cont: f64 = row.iter().zip(&un[k2]).map(|(p, u)| p * u).sum();
            j_cont += pr * (-loss + rules.beta[i][t][k][cell] + cont);
        }
    }
    (j_stop, u_next.map(|_| j_cont))
}

pub fn solve_owner(model: &OwnerModel, rules: &MechanismRules) -> OwnerSolution {
    let horizon = model.horizon();
    let m = model.m();
    let i = model.owner;
    let empty = |fill: f64| -> Tab3 { (0..=horizon).map(|t| vec![vec![fill; m]; model.lattice.len(t)]).collect() };
    let mut u = empty(0.0);
    let mut j_stop = empty(0.0);
    let mut j_cont = empty(f64::NAN);
    let mut g = empty(f64::NAN);
    let mut stop: Vec<Vec<Vec<bool>>> = (0..=horizon).map(|t| vec![vec![false; m]; model.lattice.len(t)]).collect();
    for t in (0..=horizon).rev() {
        let allowed = model.stop_allowed(t);
        for k in 0..model.lattice.len(t) {
            for v in 0..m {
                let u_next = (t < horizon).then(|| u[t + 1].as_slice());
                let (js, jc) = branch_values(model, rules, u_next, t, k, v, v);
                j_stop[t][k][v] = js;
                match jc {
                    None => {
                        u[t][k][v] = js;
                        stop[t][k][v] = true;
                    }
                    Some(jc) => {
                        j_cont[t][k][v] = jc;
                        g[t][k][v] = jc - js + rules.rho[i][t];
                        let s = allowed && js > jc + TIE_TOL;
                        stop[t][k][v] = s;
                        u[t][k][v] = if allowed { js.max(jc) } else { jc };
                    }
                }
            }
        }
    }
    OwnerSolution { u, j_stop, j_cont, g, stop, rho: rules.rho[i].clone() }
}

pub fn solve_value_function(inst: &MarketInstance, rules: &MechanismRules, beliefs: &BeliefModel) -> Result<ValueSolution> {
    rules.check(inst)?;
    check_beliefs(inst, beliefs)?;
    let owners = (0..inst.n())
        .map(|i| solve_owner(&OwnerModel::new(inst, i, &rules.sigma, &rules.lattice, beliefs), rules))
        .collect();
    Ok(ValueSolution { owners })
}

fn check_beliefs(inst: &MarketInstance, beliefs: &BeliefModel) -> Result<()> {
    if beliefs.others.len() != inst.n() || beliefs.others.iter().any(|o| o.len() != inst.horizon + 1) {
        return Err(Error::Structural("belief model does not match the instance".into()));
    }
    Ok(())
}

/// Expected payoff from (t, k, v) when stopping exactly at period τ.
pub fn interim_payoff(model: &OwnerModel, rules: &MechanismRules, t: usize, k: usize, v: usize, tau: usize) -> Result<f64> {
    if tau < t || tau > model.horizon() {
        return Err(Error::Argument(format!("tau = {tau} outside [{t}, {}]", model.horizon())));
    }
    let m = model.m();
    let mut next: Option<Vec<Vec<f64>>> = None;
    for s in (t..=tau).rev() {
        let levels = if s == t { vec![k] } else { (0..model.lattice.len(s)).collect() };
        let mut cur = vec![vec![0.0; m]; model.lattice.len(s)];
        for &kk in &levels {
            for x in 0..m {
                let (js, jc) = branch_values(model, rules, if s == tau { None } else { next.as_deref() }, s, kk, x, x);
                cur[kk][x] = if s == tau { js } else { jc.unwrap() };
            }
        }
        next = Some(cur);
    }
    Ok(next.unwrap()[k][v])
}

/// Continuation value minus stop value net of ρ; stop iff G < ρ(t) beyond the tie band.
pub fn g_incentive(solution: &ValueSolution, owner: usize, t: usize, k: usize, v: usize) -> Result<f64> {
    let s = &solution.owners[owner];
    if t + 1 >= s.u.len() {
        return Err(Error::Argument("G is undefined at the final period".into()));
    }
    Ok(s.g[t][k][v])
}

pub fn stopping_region(solution: &ValueSolution, owner: usize, t: usize, k: usize) -> Vec<usize> {
    let s = &solution.owners[owner];
    (0..s.stop[t][k].len()).filter(|&v| s.stop[t][k][v]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdExtraction {
    pub table: ThresholdTable,
    /// Periods whose stopping region is not an up-set.
    pub non_threshold: Vec<(usize, usize)>,
}

pub fn extract_thresholds(solution: &ValueSolution, owner: usize) -> ThresholdExtraction {
    let s = &solution.owners[owner];
    let horizon = s.u.len() - 1;
    let mut kl = Vec::with_capacity(horizon + 1);
    let mut kr = Vec::with_capacity(horizon + 1);
    let mut non_threshold = Vec::new();
    for t in 0..=horizon {
        let mut row_l = Vec::new();
        let mut row_r = Vec::new();
        for k in 0..s.u[t].len() {
            if t == horizon {
                row_l.push(Threshold::At(0));
                row_r.push(Threshold::At(0));
                continue;
            }
            let region = &s.stop[t][k];
            let l = region.iter().position(|&b| b);
            match l {
                Some(l) => {
                    if region[l..].iter().any(|&b| !b) {
                        non_threshold.push((t, k));
                    }
                    row_l.push(Threshold::At(l));
                }
                None => row_l.push(Threshold::Never),
            }
            let band = (0..region.len()).rev().find(|&v| (s.j_cont[t][k][v] - s.j_stop[t][k][v]).abs() <= TIE_TOL);
            row_r.push(match band {
                Some(r) => Threshold::At(r),
                None => *row_l.last().unwrap(),
            });
        }
        kl.push(row_l);
        kr.push(row_r);
    }
    ThresholdExtraction { table: ThresholdTable { kl, kr }, non_threshold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub beliefs: BeliefModel,
    pub solution: ValueSolution,
    pub thresholds: Vec<ThresholdTable>,
    pub warnings: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates beliefs → backward induction → thresholds until the thresholds repeat.
pub fn solve_fixed_point(inst: &MarketInstance, rules: &MechanismRules) -> Result<FixedPoint> {
    rules.check(inst)?;
    let mut current: Option<Vec<ThresholdTable>> = None;
    for it in 1..=MAX_FIXED_POINT_ITERS {
        let beliefs = build_beliefs(inst, &rules.sigma, &rules.lattice, current.as_deref());
        let solution = solve_value_function(inst, rules, &beliefs)?;
        let extractions: Vec<ThresholdExtraction> = (0..inst.n()).map(|i| extract_thresholds(&solution, i)).collect();
        let tables: Vec<ThresholdTable> = extractions.iter().map(|e| e.table.clone()).collect();
        if current.as_ref() == Some(&tables) {
            return Ok(FixedPoint {
                warnings: non_threshold_warnings(&extractions),
                beliefs,
                solution,
                thresholds: tables,
                iterations: it,
                converged: true,
            });
        }
        if it == MAX_FIXED_POINT_ITERS {
            let mut warnings = non_threshold_warnings(&extractions);
            warnings.push(format!("belief/threshold iteration did not converge in {MAX_FIXED_POINT_ITERS} rounds"));
            return Ok(FixedPoint { beliefs, solution, thresholds: tables, warnings, iterations: it, converged: false });
        }
        current = Some(tables);
    }
    unreachable!()
}

fn non_threshold_warnings(ex: &[ThresholdExtraction]) -> Vec<String> {
    ex.iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.non_threshold
                .iter()
                .map(move |(t, k)| format!("owner {i}: stopping region at t={t}, level {k} is not an up-set"))
        })
        .collect()
}
