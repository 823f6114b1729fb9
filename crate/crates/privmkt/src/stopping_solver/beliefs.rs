use super::rules::{BudgetLattice, ReportSpace, Sigma, ThresholdTable};
use crate::market_core::MarketInstance;
use serde::{Deserialize, Serialize};

/// Truthful-play marginals of every owner, and the induced law of the
/// others' joint report as seen by each owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefModel {
    /// `[owner][t][digit]`, the last digit being "departed".
    pub marginals: Vec<Vec<Vec<f64>>>,
    /// `[owner][t]` probability of still being active at period t.
    pub survival: Vec<Vec<f64>>,
    /// `[owner][t]`: (partial cell with the owner's digit zeroed, probability).
    pub others: Vec<Vec<Vec<(usize, f64)>>>,
    /// `[owner][t][level]`: law of the accumulated loss given the owner is active.
    pub level_dist: Vec<Vec<Vec<f64>>>,
    /// `[owner][t]`: expected ε_t given the owner is active.
    pub expected_eps: Vec<Vec<f64>>,
    /// Commitment period implied by the expected ε path, when gating is on.
    pub commitment: Vec<Option<usize>>,
}

/// Forward pass over the exact joint chain. Without thresholds every owner
/// stays active through T.
pub fn build_beliefs(
    inst: &MarketInstance,
    sigma: &Sigma,
    lattice: &BudgetLattice,
    thresholds: Option<&[ThresholdTable]>,
) -> BeliefModel {
    let n = inst.n();
    let horizon = inst.horizon;
    let space = ReportSpace::new(inst);
    let cells = space.cells();
    let mut marginals = vec![vec![]; n];
    let mut survival = vec![vec![]; n];
    let mut level_dist = vec![vec![]; n];
    let mut expected_eps = vec![vec![]; n];
    let mut commitment: Vec<Option<usize>> = vec![None; n];
    let mut cum_expected = vec![0.0; n];

    // dist[level][cell]
    let mut dist = vec![vec![0.0; cells]; 1];
    for c in 0..cells {
        let reps = space.decode(c);
        if reps.iter().all(Option::is_some) {
            dist[0][c] = reps
                .iter()
                .enumerate()
                .map(|(i, r)| inst.kernel(i).initial[r.unwrap()])
                .product();
        }
    }

    for t in 0..=horizon {
        let nk = lattice.len(t);
        for i in 0..n {
            let mut marg = vec![0.0; space.departed(i) + 1];
            let mut lev = vec![0.0; nk];
            let mut e_sum = 0.0;
            for (k, row) in dist.iter().enumerate() {
                for (c, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let d = space.digit(c, i);
                    marg[d] += p;
                    if d != space.departed(i) {
                        lev[k] += p;
                        e_sum += p * inst.eps.get(sigma.table[t][c]);
                    }
                }
            }
            let alive: f64 = lev.iter().sum();
            if alive > 0.0 {
                for x in &mut lev {
                    *x /= alive;
                }
                e_sum /= alive;
            } else {
                lev = vec![1.0 / nk as f64; nk];
            }
            cum_expected[i] += e_sum;
            if commitment[i].is_none() && cum_expected[i] >= inst.owners[i].budget - 1e-12 {
                commitment[i] = Some(t);
            }
            marginals[i].push(marg);
            survival[i].push(alive);
            level_dist[i].push(lev);
            expected_eps[i].push(e_sum);
        }
        if t == horizon {
            break;
        }
        let mut next = vec![vec![0.0; cells]; lattice.len(t + 1)];
        for (k, row) in dist.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let reps = space.decode(c);
                let e = inst.eps.get(sigma.table[t][c]);
                let c_next = lattice.level(t, k) + e;
                let k2 = lattice.index(t + 1, c_next).expect("lattice covers sigma outputs");
                let bin = inst.bins.bin_of(c_next);
                // each active owner either stops or draws its next value
                let mut branches: Vec<(usize, f64)> = vec![(0, p)];
                for (i, r) in reps.iter().enumerate() {
                    let s = space.stride(i);
                    let mut grown = Vec::new();
                    match r {
                        None => {
                            for (base, w) in branches {
                                grown.push((base + space.departed(i) * s, w));
                            }
                        }
                        Some(v) => {
                            let stops = thresholds.is_some_and(|th| {
                                let gated = inst.commitment_gating && commitment[i].is_none_or(|tc| t < tc);
                                !gated && th[i].kl[t][k].admits(*v)
                            });
                            if stops {
                                for (base, w) in branches {
                                    grown.push((base + space.departed(i) * s, w));
                                }
                            } else {
                                let row = inst.kernel(i).row(t, *v, bin);
                                for (base, w) in branches {
                                    for (v2, &q) in row.iter().enumerate() {
                                        if q > 0.0 {
                                            grown.push((base + v2 * s, w * q));
                                        }
                                    }
                                }
                            }
                        }
                    }
                    branches = grown;
                }
                for (c2, w) in branches {
                    next[k2][c2] += w;
                }
            }
        }
        dist = next;
    }

    let others = (0..n)
        .map(|i| {
            (0..=horizon)
                .map(|t| {
                    let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
                    for j in (0..n).filter(|&j| j != i) {
                        let s = space.stride(j);
                        acc = acc
                            .into_iter()
                            .flat_map(|(base, w)| {
                                marginals[j][t]
                                    .iter()
                                    .enumerate()
                                    .filter(|(_, &q)| q > 0.0)
                                    .map(move |(d, &q)| (base + d * s, w * q))
                                    .collect::<Vec<_>>()
                            })
                            .collect();
                    }
                    acc
                })
                .collect()
        })
        .collect();

    BeliefModel { marginals, survival, others, level_dist, expected_eps, commitment }
}

/// Everything one owner needs to evaluate expectations over the others'
/// reports, the ε they induce and the next lattice level.
pub struct OwnerModel<'a> {
    pub inst: &'a MarketInstance,
    pub owner: usize,
    pub sigma: &'a Sigma,
    pub lattice: &'a BudgetLattice,
    pub beliefs: &'a BeliefModel,
    stride: usize,
    /// `[t][level][eps index]` → (next level, kernel bin).
    advance: Vec<Vec<Vec<Option<(usize, usize)>>>>,
}

impl<'a> OwnerModel<'a> {
    pub fn new(
        inst: &'a MarketInstance,
        owner: usize,
        sigma: &'a Sigma,
        lattice: &'a BudgetLattice,
        beliefs: &'a BeliefModel,
    ) -> Self {
        let stride = ReportSpace::new(inst).stride(owner);
        let advance = (0..inst.horizon)
            .map(|t| {
                (0..lattice.len(t))
                    .map(|k| {
                        (0..inst.eps.len())
                            .map(|e| {
                                let c = lattice.level(t, k) + inst.eps.get(e);
                                lattice.index(t + 1, c).map(|k2| (k2, inst.bins.bin_of(c)))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { inst, owner, sigma, lattice, beliefs, stride, advance }
    }

    pub fn horizon(&self) -> usize {
        self.inst.horizon
    }

    pub fn m(&self) -> usize {
        self.inst.grid(self.owner).len()
    }

    pub fn value(&self, v: usize) -> f64 {
        self.inst.grid(self.owner).get(v)
    }

    pub fn others(&self, t: usize) -> &[(usize, f64)] {
        &self.beliefs.others[self.owner][t]
    }

    pub fn cell(&self, partial: usize, report: usize) -> usize {
        partial + report * self.stride
    }

    pub fn eps_index(&self, t: usize, cell: usize) -> usize {
        self.sigma.table[t][cell]
    }

    pub fn eps(&self, t: usize, cell: usize) -> f64 {
        self.inst.eps.get(self.sigma.table[t][cell])
    }

    /// Next level and kernel bin after ε index `e` at (t, k).
    pub fn step(&self, t: usize, k: usize, e: usize) -> (usize, usize) {
        self.advance[t][k][e].expect("sigma output reachable in lattice")
    }

    pub fn row(&self, t: usize, v: usize, bin: usize) -> &[f64] {
        self.inst.kernel(self.owner).row(t, v, bin)
    }

    pub fn stop_allowed(&self, t: usize) -> bool {
        if t == self.inst.horizon || !self.inst.commitment_gating {
            return true;
        }
        self.beliefs.commitment[self.owner].is_some_and(|tc| t >= tc)
    }
}
