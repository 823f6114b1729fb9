//! Small instances shared by tests, examples and the CLI's `--fixture` mode.

use crate::market_core::{
    drift_kernel, sticky_kernel, uniform_kernel, BudgetBinning, EpsilonGrid, MarketInstance, OwnerSpec,
    TransitionKernel, ValueGrid,
};
use crate::stopping_solver::{Sigma, Threshold};
use rand::Rng;

fn instance(horizon: usize, owners: Vec<OwnerSpec>, l: f64, eps: Vec<f64>, bins: usize) -> MarketInstance {
    let eps = EpsilonGrid::new(eps).unwrap();
    let bins = BudgetBinning::uniform(bins, horizon, eps.cap()).unwrap();
    MarketInstance::new(horizon, owners, l, 0.0, eps, bins, false).unwrap()
}

fn owner(label: &str, grid: Vec<f64>, kernel: TransitionKernel) -> OwnerSpec {
    OwnerSpec { label: label.into(), grid: ValueGrid::new(grid).unwrap(), kernel, budget: 0.0 }
}

/// Two owners on 3-point grids over periods {0, 1}.
pub fn two_owner_t1() -> MarketInstance {
    let k = sticky_kernel(0.5, 3, 1, 1, None).unwrap();
    let k2 = sticky_kernel(0.3, 3, 1, 1, Some(vec![0.5, 0.3, 0.2])).unwrap();
    instance(1, vec![owner("a", vec![1.0, 2.0, 3.0], k), owner("b", vec![0.5, 1.0, 2.0], k2)], 3.0, vec![0.2, 0.5], 1)
}

/// σ for [`two_owner_t1`]: less privacy loss when the reported values are high.
pub fn two_owner_sigma(inst: &MarketInstance) -> Sigma {
    Sigma::from_fn(inst, |_, r| {
        let top = r.iter().flatten().filter(|&&v| v >= 1).count();
        if top == 2 {
            0
        } else {
            1
        }
    })
}

/// One owner, iid uniform values, three periods; used with report-independent σ.
pub fn constant_sigma_instance() -> MarketInstance {
    let k = uniform_kernel(4, 2, 1, None);
    instance(2, vec![owner("c", vec![0.5, 1.0, 1.5, 2.0], k)], 2.0, vec![0.2, 0.4, 0.6], 1)
}

/// One owner, three values, persistent values; paired with [`adversarial_sigma`].
pub fn adversarial_instance() -> MarketInstance {
    let k = sticky_kernel(0.6, 3, 1, 1, None).unwrap();
    instance(1, vec![owner("adv", vec![1.0, 2.0, 3.0], k)], 2.0, vec![0.1, 0.5, 1.0], 1)
}

/// Lower ε for higher reports.
pub fn adversarial_sigma(inst: &MarketInstance) -> Sigma {
    Sigma::from_fn(inst, |_, r| match r[0] {
        Some(v) => 2 - v.min(2),
        None => 0,
    })
}

/// Single owner on an evenly spaced grid with a smooth drift kernel.
pub fn smooth_instance(m: usize, horizon: usize, delta: f64) -> MarketInstance {
    let pts: Vec<f64> = (0..m).map(|j| 1.0 + 2.0 * j as f64 / (m - 1) as f64).collect();
    let grid = ValueGrid::new(pts.clone()).unwrap();
    let eps = EpsilonGrid::new(vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let bins = BudgetBinning::uniform(1, horizon, eps.cap()).unwrap();
    let k = drift_kernel(&grid, &bins, horizon, delta, Some(0.6), 0.0, None).unwrap();
    MarketInstance::new(horizon, vec![owner("smooth", pts, k)], 4.0, 0.0, eps, bins, false).unwrap()
}

/// Random full-support FOSD kernel: random rows whose CDF columns are then
/// sorted so that higher conditioning values have pointwise lower CDFs.
pub fn random_fosd_kernel<R: Rng>(rng: &mut R, m: usize, steps: usize, bins: usize) -> TransitionKernel {
    let random_row = |rng: &mut R| -> Vec<f64> {
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    let initial = random_row(rng);
    let transitions = (0..steps)
        .map(|_| {
            let per_bin: Vec<Vec<Vec<f64>>> = (0..bins)
                .map(|_| {
                    let rows: Vec<Vec<f64>> = (0..m).map(|_| random_row(rng)).collect();
                    let mut cdfs: Vec<Vec<f64>> = rows
                        .iter()
                        .map(|r| {
                            let mut acc = 0.0;
                            r.iter()
                                .map(|p| {
                                    acc += p;
                                    acc
                                })
                                .collect()
                        })
                        .collect();
                    for col in 0..m {
                        let mut c: Vec<f64> = cdfs.iter().map(|r| r[col]).collect();
                        c.sort_by(|a, b| b.total_cmp(a));
                        for (j, r) in cdfs.iter_mut().enumerate() {
                            r[col] = if col == m - 1 { 1.0 } else { c[j] };
                        }
                    }
                    cdfs.into_iter()
                        .map(|f| (0..m).map(|k| if k == 0 { f[0] } else { f[k] - f[k - 1] }).collect())
                        .collect()
                })
                .collect();
            // reorder [bin][v_prev] into [v_prev][bin]
            (0..m).map(|j| (0..bins).map(|b| per_bin[b][j].clone()).collect()).collect()
        })
        .collect();
    TransitionKernel { initial, transitions }
}

/// One owner with a random increasing grid and random FOSD kernel.
pub fn random_single_owner<R: Rng>(rng: &mut R, horizon: usize, m: usize) -> MarketInstance {
    let mut pts = Vec::with_capacity(m);
    let mut x = rng.gen_range(0.5..1.5);
    for _ in 0..m {
        pts.push(x);
        x += rng.gen_range(0.2..1.0);
    }
    let k = random_fosd_kernel(rng, m, horizon, 1);
    instance(horizon, vec![owner("rand", pts, k)], rng.gen_range(1.0..5.0), vec![0.1, 0.3, 0.6, 1.0], 1)
}

/// Random σ for a single owner that is nonincreasing in the report.
pub fn random_monotone_sigma<R: Rng>(rng: &mut R, inst: &MarketInstance) -> Sigma {
    let m = inst.grid(0).len();
    let ne = inst.eps.len();
    let table: Vec<Vec<usize>> = (0..=inst.horizon)
        .map(|_| {
            let mut levels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..ne)).collect();
            levels.sort_unstable_by(|a, b| b.cmp(a));
            let mut row = levels;
            row.push(rng.gen_range(0..ne));
            row
        })
        .collect();
    Sigma { table }
}

/// Random design thresholds; the final period is always v̲.
pub fn random_design<R: Rng>(rng: &mut R, inst: &MarketInstance) -> Vec<Threshold> {
    let m = inst.grid(0).len();
    (0..=inst.horizon)
        .map(|t| {
            if t == inst.horizon {
                Threshold::At(0)
            } else if rng.gen_bool(0.3) {
                Threshold::Never
            } else {
                Threshold::At(rng.gen_range(0..m))
            }
        })
        .collect()
}

/// One owner whose value is redrawn each period from a fixed random law, so
/// the kernel ignores the previous value.
pub fn random_iid_owner<R: Rng>(rng: &mut R, horizon: usize, m: usize) -> MarketInstance {
    let mut pts = Vec::with_capacity(m);
    let mut x = rng.gen_range(0.5..1.5);
    for _ in 0..m {
        pts.push(x);
        x += rng.gen_range(0.2..1.0);
    }
    let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    let row: Vec<f64> = w.into_iter().map(|x| x / s).collect();
    let k = TransitionKernel { initial: row.clone(), transitions: vec![vec![vec![row; 1]; m]; horizon] };
    instance(horizon, vec![owner("iid", pts, k)], rng.gen_range(1.0..5.0), vec![0.1, 0.3, 0.6, 1.0], 1)
}
