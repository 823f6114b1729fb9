use super::rules::{Threshold, ThresholdTable};
use super::solve::ValueSolution;
use crate::market_core::MarketInstance;
use serde::Serialize;
use std::fmt::Write;

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// Columnar CSV, one row per (owner, t, level, v). `bin` is the kernel bin of
/// the level's accumulated loss.
pub fn solution_csv(inst: &MarketInstance, lattice: &super::rules::BudgetLattice, sol: &ValueSolution) -> String {
    let mut out = String::from("owner,t,bin,cum_eps,v,J_stop,J_cont,U,G,stop_flag\n");
    for (i, s) in sol.owners.iter().enumerate() {
        for t in 0..s.u.len() {
            for k in 0..s.u[t].len() {
                let c = lattice.level(t, k);
                for v in 0..s.u[t][k].len() {
                    let _ = writeln!(
                        out,
                        "{i},{t},{},{c},{},{},{},{},{},{}",
                        inst.bins.bin_of(c),
                        inst.grid(i).get(v),
                        num(s.j_stop[t][k][v]),
                        num(s.j_cont[t][k][v]),
                        num(s.u[t][k][v]),
                        num(s.g[t][k][v]),
                        u8::from(s.stop[t][k][v])
                    );
                }
            }
        }
    }
    out
}

#[derive(Serialize)]
struct Entry {
    t: usize,
    level: usize,
    cum_eps: f64,
    kappa_l: Option<f64>,
    kappa_r: Option<f64>,
    kappa_l_index: Threshold,
    kappa_r_index: Threshold,
}

#[derive(Serialize)]
struct OwnerSummary {
    owner: usize,
    thresholds: Vec<Entry>,
}

pub fn thresholds_json(
    inst: &MarketInstance,
    lattice: &super::rules::BudgetLattice,
    tables: &[ThresholdTable],
    warnings: &[String],
) -> serde_json::Value {
    let point = |i: usize, th: Threshold| match th {
        Threshold::At(k) => Some(inst.grid(i).get(k)),
        Threshold::Never => None,
    };
    let owners: Vec<OwnerSummary> = tables
        .iter()
        .enumerate()
        .map(|(i, tab)| OwnerSummary {
            owner: i,
            thresholds: (0..tab.kl.len())
                .flat_map(|t| {
                    (0..tab.kl[t].len()).map(move |k| Entry {
                        t,
                        level: k,
                        cum_eps: lattice.level(t, k),
                        kappa_l: point(i, tab.kl[t][k]),
                        kappa_r: point(i, tab.kr[t][k]),
                        kappa_l_index: tab.kl[t][k],
                        kappa_r_index: tab.kr[t][k],
                    })
                })
                .collect(),
        })
        .collect();
    serde_json::json!({ "owners": owners, "warnings": warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::stopping_solver::{solve_fixed_point, MechanismRules};

    #[test]
    fn csv_has_one_row_per_state() {
        let inst = fixtures::two_owner_t1();
        let rules = MechanismRules::zero_payments(&inst, fixtures::two_owner_sigma(&inst));
        let fp = solve_fixed_point(&inst, &rules).unwrap();
        let csv = solution_csv(&inst, &rules.lattice, &fp.solution);
        let states: usize = (0..2)
            .map(|i| (0..=1).map(|t| rules.lattice.len(t) * inst.grid(i).len()).sum::<usize>())
            .sum();
        assert_eq!(csv.lines().count(), states + 1);
        // continuation columns are blank at the final period
        let last = csv.lines().find(|l| l.starts_with("0,1,")).unwrap();
        assert!(last.contains(",,"));
        let json = thresholds_json(&inst, &rules.lattice, &fp.thresholds, &[]);
        assert_eq!(json["owners"].as_array().unwrap().len(), 2);
    }
}
