//! Seeded Monte Carlo runs of the market under fixed rules and thresholds.

use crate::buyer_optimizer::ledger_allows_stop;
use crate::error::{Error, Result};
use crate::market_core::{flow_loss, MarketInstance};
use crate::privacy_ledger::PrivacyLedger;
use crate::stopping_solver::{MechanismRules, ReportSpace, ThresholdTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

/// Report `v_report` instead of `v_true` for `owner` at period `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub owner: usize,
    pub t: usize,
    pub v_true: usize,
    pub v_report: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyOverrides {
    pub overrides: Vec<Override>,
}

impl StrategyOverrides {
    pub fn truthful() -> Self {
        Self::default()
    }

    fn lookup(&self, inst: &MarketInstance) -> Result<HashMap<(usize, usize, usize), usize>> {
        let mut map = HashMap::new();
        for o in &self.overrides {
            if o.owner >= inst.n() || o.t > inst.horizon {
                return Err(Error::Validation(format!("override for owner {} at t={} is out of range", o.owner, o.t)));
            }
            let m = inst.grid(o.owner).len();
            if o.v_true >= m || o.v_report >= m {
                return Err(Error::Validation(format!(
                    "override for owner {} at t={} references an off-grid value",
                    o.owner, o.t
                )));
            }
            map.insert((o.owner, o.t, o.v_true), o.v_report);
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub t: usize,
    pub active: Vec<usize>,
    /// True value indices; `None` once departed.
    pub values: Vec<Option<usize>>,
    pub reports: Vec<Option<usize>>,
    pub eps: f64,
    pub level: usize,
    pub cell: usize,
    pub payments: Vec<f64>,
    /// Each owner's ledger total after this period.
    pub cumulative_eps: Vec<f64>,
    pub stops: Vec<bool>,
    pub accuracy_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub seed: u64,
    pub trial: u64,
    pub periods: Vec<PeriodRecord>,
    pub owner_payoff: Vec<f64>,
    pub stop_period: Vec<usize>,
    pub buyer_cost: f64,
}

fn owner_rng(seed: u64, trial: u64, owner: usize, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial * n as u64 + owner as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

fn run_trial(
    inst: &MarketInstance,
    rules: &MechanismRules,
    thresholds: &[ThresholdTable],
    overrides: &HashMap<(usize, usize, usize), usize>,
    seed: u64,
    trial: u64,
) -> Result<SimTrace> {
    let n = inst.n();
    let space = ReportSpace::new(inst);
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| owner_rng(seed, trial, i, n)).collect();
    let mut ledgers: Vec<PrivacyLedger> =
        inst.owners.iter().map(|o| PrivacyLedger::new(o.budget, inst.eps.cap())).collect::<Result<_>>()?;
    let mut values: Vec<Option<usize>> = (0..n).map(|i| Some(draw(&mut rngs[i], &inst.kernel(i).initial))).collect();
    let mut level = 0;
    let mut periods = Vec::new();
    let mut owner_payoff = vec![0.0; n];
    let mut stop_period = vec![inst.horizon; n];
    let mut buyer_cost = 0.0;
    for t in 0..=inst.horizon {
        if values.iter().all(Option::is_none) {
            break;
        }
        let reports: Vec<Option<usize>> = values
            .iter()
            .enumerate()
            .map(|(i, v)| v.map(|v| *overrides.get(&(i, t, v)).unwrap_or(&v)))
            .collect();
        let cell = space.encode(&reports);
        let e = rules.sigma.table[t][cell];
        let eps = inst.eps.get(e);
        let cum_after = rules.lattice.level(t, level) + eps;
        let mut payments = vec![0.0; n];
        let mut stops = vec![false; n];
        let accuracy_loss = inst.l * (-eps).exp();
        buyer_cost += accuracy_loss;
        for i in 0..n {
            let Some(v) = values[i] else { continue };
            ledgers[i].record(eps)?;
            stops[i] = t == inst.horizon
                || (ledger_allows_stop(inst, i, t, ledgers[i].cumulative()) && thresholds[i].kl[t][level].admits(v));
            payments[i] = if stops[i] {
                rules.theta[i][t][level][cell] + rules.rho[i][t]
            } else {
                rules.beta[i][t][level][cell]
            };
            owner_payoff[i] += payments[i] - flow_loss(inst.grid(i).get(v), eps);
            buyer_cost += payments[i];
            if stops[i] {
                stop_period[i] = t;
            }
        }
        periods.push(PeriodRecord {
            t,
            active: (0..n).filter(|&i| values[i].is_some()).collect(),
            values: values.clone(),
            reports,
            eps,
            level,
            cell,
            payments,
            cumulative_eps: ledgers.iter().map(|l| l.cumulative()).collect(),
            stops: stops.clone(),
            accuracy_loss,
        });
        if t == inst.horizon {
            break;
        }
        let bin = inst.bins.bin_of(cum_after);
        for i in 0..n {
            values[i] = match values[i] {
                Some(v) if !stops[i] => Some(draw(&mut rngs[i], inst.kernel(i).row(t, v, bin))),
                _ => None,
            };
        }
        level = rules.lattice.index(t + 1, cum_after).expect("lattice covers sigma outputs");
    }
    Ok(SimTrace { seed, trial, periods, owner_payoff, stop_period, buyer_cost })
}

/// One deterministic trace for `seed` (trial 0).
pub fn run_trace(
    inst: &MarketInstance,
    rules: &MechanismRules,
    thresholds: &[ThresholdTable],
    overrides: &StrategyOverrides,
    seed: u64,
) -> Result<SimTrace> {
    rules.check(inst)?;
    run_trial(inst, rules, thresholds, &overrides.lookup(inst)?, seed, 0)
}

/// Pairwise summation; fixed tree shape keeps results independent of scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn mean_and_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub trials: usize,
    pub seed: u64,
    pub owner_mean_payoff: Vec<f64>,
    pub owner_std_error: Vec<Option<f64>>,
    pub buyer_mean_cost: f64,
    pub buyer_std_error: Option<f64>,
    /// `[owner][t]` number of trials stopping at t.
    pub stopping_histogram: Vec<Vec<u64>>,
    pub mean_cumulative_eps: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub traces: Vec<SimTrace>,
}

struct TrialOutcome {
    payoff: Vec<f64>,
    cost: f64,
    stop: Vec<usize>,
    cum: Vec<f64>,
    trace: Option<SimTrace>,
}

/// Runs `trials` independent trials in parallel; the first `keep_traces` traces are retained.
pub fn monte_carlo(
    inst: &MarketInstance,
    rules: &MechanismRules,
    thresholds: &[ThresholdTable],
    trials: usize,
    seed: u64,
    keep_traces: usize,
) -> Result<SimSummary> {
    monte_carlo_with(inst, rules, thresholds, &StrategyOverrides::truthful(), trials, seed, keep_traces)
}

pub fn monte_carlo_with(
    inst: &MarketInstance,
    rules: &MechanismRules,
    thresholds: &[ThresholdTable],
    overrides: &StrategyOverrides,
    trials: usize,
    seed: u64,
    keep_traces: usize,
) -> Result<SimSummary> {
    if trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    rules.check(inst)?;
    let map = overrides.lookup(inst)?;
    let n = inst.n();
    let outcomes: Vec<TrialOutcome> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let tr = run_trial(inst, rules, thresholds, &map, seed, trial)?;
            let cum = tr.periods.iter().fold(vec![0.0f64; n], |mut acc, p| {
                for (a, c) in acc.iter_mut().zip(&p.cumulative_eps) {
                    *a = (*a).max(*c);
                }
                acc
            });
            Ok(TrialOutcome {
                payoff: tr.owner_payoff.clone(),
                cost: tr.buyer_cost,
                stop: tr.stop_period.clone(),
                cum,
                trace: ((trial as usize) < keep_traces).then_some(tr),
            })
        })
        .collect::<Result<_>>()?;
    let mut owner_mean_payoff = Vec::with_capacity(n);
    let mut owner_std_error = Vec::with_capacity(n);
    let mut mean_cumulative_eps = Vec::with_capacity(n);
    let mut stopping_histogram = vec![vec![0u64; inst.horizon + 1]; n];
    for i in 0..n {
        let xs: Vec<f64> = outcomes.iter().map(|o| o.payoff[i]).collect();
        let (m, se) = mean_and_se(&xs);
        owner_mean_payoff.push(m);
        owner_std_error.push(se);
        let cs: Vec<f64> = outcomes.iter().map(|o| o.cum[i]).collect();
        mean_cumulative_eps.push(pairwise_sum(&cs) / trials as f64);
        for o in &outcomes {
            stopping_histogram[i][o.stop[i]] += 1;
        }
    }
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let (buyer_mean_cost, buyer_std_error) = mean_and_se(&costs);
    let traces = outcomes.into_iter().filter_map(|o| o.trace).collect();
    Ok(SimSummary {
        trials,
        seed,
        owner_mean_payoff,
        owner_std_error,
        buyer_mean_cost,
        buyer_std_error,
        stopping_histogram,
        mean_cumulative_eps,
        traces,
    })
}

/// One row per owner and period of every trace.
pub fn traces_csv(traces: &[SimTrace]) -> String {
    let mut out = String::from("trial,t,owner,active,value,report,eps,payment,cumulative_eps,stopped\n");
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for tr in traces {
        for p in &tr.periods {
            for i in 0..p.values.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    tr.trial,
                    p.t,
                    i,
                    p.values[i].is_some(),
                    opt(p.values[i]),
                    opt(p.reports[i]),
                    p.eps,
                    p.payments[i],
                    p.cumulative_eps[i],
                    p.stops[i]
                );
            }
        }
    }
    out
}
