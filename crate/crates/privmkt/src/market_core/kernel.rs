use super::grid::{BudgetBinning, ValueGrid};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Markov dynamics of one owner's value: `initial` is f₀ and
/// `transitions[t][v_prev][bin]` is the law of v_{t+1} given v_t = v_prev and
/// the bin of the loss accumulated through period t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    /// `None` for the initial distribution.
    pub t: Option<usize>,
    pub v_prev: usize,
    pub bin: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FosdViolation {
    pub t: usize,
    pub bin: usize,
    pub v_low: usize,
    pub v_high: usize,
    pub grid_index: usize,
    pub excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    /// Rows whose mass differs from 1 by more than 1e-12; `v` holds 0.
    pub normalization: Vec<(CellRef, f64)>,
    pub support: Vec<CellRef>,
    pub fosd: Option<FosdViolation>,
}

impl KernelReport {
    pub fn is_valid(&self) -> bool {
        self.normalization.is_empty() && self.support.is_empty() && self.fosd.is_none()
    }
}

const NORM_TOL: f64 = 1e-12;
const FOSD_TOL: f64 = 1e-12;

impl TransitionKernel {
    pub fn value_count(&self) -> usize {
        self.initial.len()
    }

    /// Number of transitions (T for horizon {0..T}).
    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn bin_count(&self) -> usize {
        self.transitions.first().and_then(|r| r.first()).map_or(0, |b| b.len())
    }

    pub fn row(&self, t: usize, v_prev: usize, bin: usize) -> &[f64] {
        &self.transitions[t][v_prev][bin]
    }

    pub fn check_shape(&self, steps: usize, m: usize, bins: usize) -> Result<()> {
        if self.initial.len() != m {
            return Err(Error::Structural(format!("initial distribution has {} entries, expected {m}", self.initial.len())));
        }
        if self.transitions.len() != steps {
            return Err(Error::Structural(format!(
                "kernel has {} transition periods, expected {steps}",
                self.transitions.len()
            )));
        }
        for (t, per_t) in self.transitions.iter().enumerate() {
            if per_t.len() != m {
                return Err(Error::Structural(format!("t={t}: {} conditioning rows, expected {m}", per_t.len())));
            }
            for (j, per_v) in per_t.iter().enumerate() {
                if per_v.len() != bins {
                    return Err(Error::Structural(format!("t={t} v_prev={j}: {} bins, expected {bins}", per_v.len())));
                }
                for (b, row) in per_v.iter().enumerate() {
                    if row.len() != m {
                        return Err(Error::Structural(format!(
                            "t={t} v_prev={j} bin={b}: row length {}, expected {m}",
                            row.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// CDF of the transition row; exactly 1 at the top point.
    pub fn cdf(&self, t: usize, v_prev: usize, bin: usize, v: usize) -> f64 {
        let row = self.row(t, v_prev, bin);
        if v + 1 >= row.len() {
            return 1.0;
        }
        row[..=v].iter().sum()
    }
}

/// Checks normalization, full support and first-order stochastic dominance.
pub fn validate_kernel(kernel: &TransitionKernel) -> Result<KernelReport> {
    let m = kernel.value_count();
    if m == 0 {
        return Err(Error::Structural("kernel has an empty initial distribution".into()));
    }
    kernel.check_shape(kernel.steps(), m, kernel.bin_count().max(1))?;
    let mut report = KernelReport::default();
    let check_row = |row: &[f64], t: Option<usize>, v_prev: usize, bin: usize, report: &mut KernelReport| {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > NORM_TOL || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            report.normalization.push((CellRef { t, v_prev, bin, v: 0 }, s));
        }
        for (v, &p) in row.iter().enumerate() {
            if !(p > 0.0) {
                report.support.push(CellRef { t, v_prev, bin, v });
            }
        }
    };
    check_row(&kernel.initial, None, 0, 0, &mut report);
    for (t, per_t) in kernel.transitions.iter().enumerate() {
        for (j, per_v) in per_t.iter().enumerate() {
            for (b, row) in per_v.iter().enumerate() {
                check_row(row, Some(t), j, b, &mut report);
            }
        }
    }
    'outer: for t in 0..kernel.steps() {
        for b in 0..kernel.bin_count() {
            for j in 0..m.saturating_sub(1) {
                let (mut lo, mut hi) = (0.0, 0.0);
                for k in 0..m {
                    lo += kernel.row(t, j, b)[k];
                    hi += kernel.row(t, j + 1, b)[k];
                    if hi > lo + FOSD_TOL {
                        report.fosd = Some(FosdViolation {
                            t,
                            bin: b,
                            v_low: j,
                            v_high: j + 1,
                            grid_index: k,
                            excess: hi - lo,
                        });
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Finite-difference ∂F(v_realized | x)/∂x at x = grid[v_prev] together with the
/// density proxy P(v_realized | v_prev) / cell width.
pub fn kernel_cdf_sensitivity(
    kernel: &TransitionKernel,
    grid: &ValueGrid,
    t: usize,
    v_realized: usize,
    v_prev: usize,
    bin: usize,
) -> Result<(f64, f64)> {
    let m = grid.len();
    if m < 2 {
        return Err(Error::SensitivityUndefined("kernel has a single conditioning row".into()));
    }
    if t >= kernel.steps() || v_realized >= m || v_prev >= m || bin >= kernel.bin_count() {
        return Err(Error::Argument(format!(
            "index out of range: t={t} v={v_realized} v_prev={v_prev} bin={bin}"
        )));
    }
    let (a, b) = if v_prev == 0 {
        (0, 1)
    } else if v_prev == m - 1 {
        (m - 2, m - 1)
    } else {
        (v_prev - 1, v_prev + 1)
    };
    let slope = (kernel.cdf(t, b, bin, v_realized) - kernel.cdf(t, a, bin, v_realized)) / (grid.get(b) - grid.get(a));
    let density = kernel.row(t, v_prev, bin)[v_realized] / grid.cell_widths()[v_realized];
    Ok((slope, density))
}

fn normalized(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    for p in &mut row {
        *p /= s;
    }
    row
}

fn replicate<F: Fn(usize, usize) -> Vec<f64>>(steps: usize, m: usize, bins: usize, row: F) -> Vec<Vec<Vec<Vec<f64>>>> {
    (0..steps)
        .map(|_| (0..m).map(|j| (0..bins).map(|b| row(j, b)).collect()).collect())
        .collect()
}

fn initial_or_uniform(initial: Option<Vec<f64>>, m: usize) -> Vec<f64> {
    initial.unwrap_or_else(|| vec![1.0 / m as f64; m])
}

/// Every row uniform over the grid.
pub fn uniform_kernel(m: usize, steps: usize, bins: usize, initial: Option<Vec<f64>>) -> TransitionKernel {
    TransitionKernel {
        initial: initial_or_uniform(initial, m),
        transitions: replicate(steps, m, bins, |_, _| vec![1.0 / m as f64; m]),
    }
}

/// Stay with probability p, otherwise redraw uniformly.
pub fn sticky_kernel(p: f64, m: usize, steps: usize, bins: usize, initial: Option<Vec<f64>>) -> Result<TransitionKernel> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Validation(format!("sticky p must lie in [0, 1), got {p}")));
    }
    Ok(TransitionKernel {
        initial: initial_or_uniform(initial, m),
        transitions: replicate(steps, m, bins, |j, _| {
            (0..m).map(|k| (1.0 - p) / m as f64 + if k == j { p } else { 0.0 }).collect()
        }),
    })
}

/// Discretized Gaussian centred at v_prev + δ + γ·(bin midpoint). The location
/// family has monotone likelihood ratios, so rows are FOSD-ordered.
pub fn drift_kernel(
    grid: &ValueGrid,
    binning: &BudgetBinning,
    steps: usize,
    delta: f64,
    width: Option<f64>,
    budget_drift: f64,
    initial: Option<Vec<f64>>,
) -> Result<TransitionKernel> {
    let m = grid.len();
    let span = (grid.upper() - grid.lower()).max(1e-12);
    let s = width.unwrap_or(span / 3.0);
    if !(s > 0.0) {
        return Err(Error::Validation(format!("drift width must be > 0, got {s}")));
    }
    let edges = binning.edges();
    Ok(TransitionKernel {
        initial: initial_or_uniform(initial, m),
        transitions: replicate(steps, m, binning.count(), |j, b| {
            let mid = 0.5 * (edges[b] + edges[b + 1]);
            let loc = grid.get(j) + delta + budget_drift * mid;
            normalized(
                (0..m)
                    .map(|k| {
                        let z = (grid.get(k) - loc) / s;
                        (-0.5 * z * z).exp().max(1e-300)
                    })
                    .collect(),
            )
        }),
    })
}
