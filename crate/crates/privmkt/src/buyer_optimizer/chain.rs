use crate::error::Result;
use crate::market_core::{kernel_cdf_sensitivity, MarketInstance};
use crate::stopping_solver::{BudgetLattice, ReportSpace, Sigma, ThresholdTable};

/// Tolerance when comparing the realized ledger against a budget.
pub(crate) const LEDGER_TOL: f64 = 1e-12;

/// Whether owner `i` may stop at t given the ledger after this period's ε.
pub(crate) fn ledger_allows_stop(inst: &MarketInstance, i: usize, t: usize, cum_after: f64) -> bool {
    t == inst.horizon || !inst.commitment_gating || cum_after >= inst.owners[i].budget - LEDGER_TOL
}

/// One visited state of the joint chain. `measures[0]` is its probability;
/// when weighted, `measures[1 + i]` is owner i's envelope-weighted measure.
pub(crate) struct Visit<'a> {
    pub t: usize,
    pub level: usize,
    pub cell: usize,
    pub reports: &'a [Option<usize>],
    pub stops: &'a [bool],
    pub measures: &'a [f64],
}

/// Probability of a cell under the initial laws, with owner `skip` replaced
/// by the weight (1 − F₀(v))·w(v) when given.
fn initial_measure(inst: &MarketInstance, reps: &[Option<usize>], skip: Option<usize>) -> f64 {
    reps.iter()
        .enumerate()
        .map(|(i, r)| {
            let v = r.expect("initial cells are fully active");
            let f0 = &inst.kernel(i).initial;
            if Some(i) == skip {
                let upto: f64 = f0[..=v].iter().sum();
                ((1.0 - upto).max(0.0)) * inst.grid(i).cell_widths()[v]
            } else {
                f0[v]
            }
        })
        .product()
}

/// Exact forward pass over (level, joint true-value cell) under truthful
/// reporting and the `thresholds` stopping rule with the realized-ledger gate.
pub(crate) fn forward_chain<F: FnMut(&Visit)>(
    inst: &MarketInstance,
    sigma: &Sigma,
    lattice: &BudgetLattice,
    thresholds: &[ThresholdTable],
    weighted: bool,
    mut visit: F,
) -> Result<()> {
    let n = inst.n();
    let horizon = inst.horizon;
    let space = ReportSpace::new(inst);
    let cells = space.cells();
    let nm = if weighted { n + 1 } else { 1 };
    // g[i][t][v][bin][v'] = −∂F(v'|v)/∂v · w(v')
    let mut g: Vec<Vec<Vec<Vec<Vec<f64>>>>> = Vec::new();
    if weighted {
        for i in 0..n {
            let m = inst.grid(i).len();
            let widths = inst.grid(i).cell_widths();
            let bins = inst.bins.count();
            let mut gi = vec![vec![vec![vec![0.0; m]; bins]; m]; horizon];
            if m >= 2 {
                for (t, gt) in gi.iter_mut().enumerate() {
                    for (v, gv) in gt.iter_mut().enumerate() {
                        for (b, gb) in gv.iter_mut().enumerate() {
                            for (v2, x) in gb.iter_mut().enumerate() {
                                let (slope, _) = kernel_cdf_sensitivity(inst.kernel(i), inst.grid(i), t, v2, v, b)?;
                                *x = -slope * widths[v2];
                            }
                        }
                    }
                }
            }
            g.push(gi);
        }
    }

    // dist[level][cell][measure]
    let mut dist = vec![vec![vec![0.0; nm]; cells]; 1];
    for (c, d) in dist[0].iter_mut().enumerate() {
        let reps = space.decode(c);
        if reps.iter().all(Option::is_some) {
            d[0] = initial_measure(inst, &reps, None);
            for i in 0..nm - 1 {
                d[1 + i] = initial_measure(inst, &reps, Some(i));
            }
        }
    }
    let mut stops = vec![false; n];
    for t in 0..=horizon {
        let mut next = (t < horizon).then(|| vec![vec![vec![0.0; nm]; cells]; lattice.len(t + 1)]);
        for (k, row) in dist.iter().enumerate() {
            for (c, meas) in row.iter().enumerate() {
                if meas.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let reps = space.decode(c);
                if reps.iter().all(Option::is_none) {
                    continue;
                }
                let e = sigma.table[t][c];
                let cum_after = lattice.level(t, k) + inst.eps.get(e);
                for (i, r) in reps.iter().enumerate() {
                    stops[i] = match r {
                        None => false,
                        Some(v) => {
                            t == horizon
                                || (ledger_allows_stop(inst, i, t, cum_after) && thresholds[i].kl[t][k].admits(*v))
                        }
                    };
                }
                visit(&Visit { t, level: k, cell: c, reports: &reps, stops: &stops, measures: meas });
                let Some(next) = next.as_mut() else { continue };
                let k2 = lattice.index(t + 1, cum_after).expect("lattice covers sigma outputs");
                let bin = inst.bins.bin_of(cum_after);
                let mut branches: Vec<(usize, Vec<f64>)> = vec![(0, meas.clone())];
                for (i, r) in reps.iter().enumerate() {
                    let s = space.stride(i);
                    match r {
                        Some(v) if !stops[i] => {
                            let row = inst.kernel(i).row(t, *v, bin);
                            let mut grown = Vec::with_capacity(branches.len() * row.len());
                            for (base, w) in &branches {
                                for (v2, &q) in row.iter().enumerate() {
                                    let gi = if weighted { g[i][t][*v][bin][v2] } else { 0.0 };
                                    if q == 0.0 && gi == 0.0 {
                                        continue;
                                    }
                                    let mut w2 = w.clone();
                                    for (j, x) in w2.iter_mut().enumerate() {
                                        *x *= if j == 1 + i { gi } else { q };
                                    }
                                    grown.push((base + v2 * s, w2));
                                }
                            }
                            branches = grown;
                        }
                        _ => {
                            for b in &mut branches {
                                b.0 += space.departed(i) * s;
                            }
                        }
                    }
                }
                for (c2, w) in branches {
                    for (x, y) in next[k2][c2].iter_mut().zip(&w) {
                        *x += y;
                    }
                }
            }
        }
        if let Some(next) = next {
            dist = next;
        }
    }
    Ok(())
}

/// Reachable (level, cell) states the exact pass would visit, as a capacity estimate.
pub(crate) fn chain_size(inst: &MarketInstance, lattice: &BudgetLattice) -> usize {
    let cells = ReportSpace::new(inst).cells();
    (0..=inst.horizon).map(|t| lattice.len(t) * cells).sum()
}
