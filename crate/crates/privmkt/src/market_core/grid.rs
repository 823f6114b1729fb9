use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Strictly increasing support of an owner's instrumental value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    points: Vec<f64>,
}

impl ValueGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Validation(format!(
                "value grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        Self::checked(points)
    }

    /// Single-point grid; only meaningful for degenerate test instances.
    pub fn degenerate(point: f64) -> Result<Self> {
        Self::checked(vec![point])
    }

    fn checked(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("value grid is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("value grid point {i} is not finite")));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!("value grid not strictly increasing at index {}", i + 1)));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.points[0]
    }

    pub fn upper(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn top(&self) -> usize {
        self.points.len() - 1
    }

    pub fn get(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// Midpoint cell widths with half cells at the two ends; 1.0 for a single point.
    pub fn cell_widths(&self) -> Vec<f64> {
        let p = &self.points;
        let m = p.len();
        if m == 1 {
            return vec![1.0];
        }
        (0..m)
            .map(|j| {
                let lo = if j == 0 { p[0] } else { 0.5 * (p[j - 1] + p[j]) };
                let hi = if j == m - 1 { p[m - 1] } else { 0.5 * (p[j] + p[j + 1]) };
                hi - lo
            })
            .collect()
    }

    pub fn index_of(&self, v: f64) -> Option<usize> {
        self.points.iter().position(|&p| (p - v).abs() <= 1e-12 * (1.0 + v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    points: Vec<f64>,
}

impl EpsilonGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("epsilon grid is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Validation(format!("epsilon grid point {i} must be finite and > 0")));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!("epsilon grid not strictly increasing at index {}", i + 1)));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn cap(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Grid index closest to `eps` (ties go to the lower point).
    pub fn nearest(&self, eps: f64) -> usize {
        let mut best = 0;
        for (i, &p) in self.points.iter().enumerate() {
            if (p - eps).abs() < (self.points[best] - eps).abs() {
                best = i;
            }
        }
        best
    }
}

/// Partition of accumulated privacy loss; the kernel conditions on the bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetBinning {
    edges: Vec<f64>,
}

impl BudgetBinning {
    pub fn new(edges: Vec<f64>, horizon: usize, cap: f64) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Validation("budget binning needs at least 2 edges".into()));
        }
        if let Some(i) = edges.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!("bin edges not strictly increasing at index {}", i + 1)));
        }
        let reach = (horizon as f64 + 1.0) * cap;
        if edges[0] > 0.0 || edges[edges.len() - 1] < reach - 1e-12 {
            return Err(Error::Validation(format!(
                "bin edges [{}, {}] do not cover [0, {reach}]",
                edges[0],
                edges[edges.len() - 1]
            )));
        }
        Ok(Self { edges })
    }

    pub fn uniform(count: usize, horizon: usize, cap: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Validation("bin count must be >= 1".into()));
        }
        let reach = (horizon as f64 + 1.0) * cap;
        let edges = (0..=count).map(|k| reach * k as f64 / count as f64).collect();
        Self::new(edges, horizon, cap)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin holding cumulative loss `c`; bins are half-open except the last.
    pub fn bin_of(&self, c: f64) -> usize {
        let n = self.count();
        for k in 0..n {
            if c < self.edges[k + 1] - 1e-12 {
                return k;
            }
        }
        n - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_grid_rules() {
        assert!(ValueGrid::new(vec![1.0]).is_err());
        assert!(ValueGrid::new(vec![1.0, 1.0]).is_err());
        assert!(ValueGrid::new(vec![1.0, f64::NAN]).is_err());
        assert!(ValueGrid::degenerate(2.0).is_ok());
        let g = ValueGrid::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(g.cell_widths(), vec![0.5, 1.5, 1.0]);
        assert_eq!((g.lower(), g.upper()), (1.0, 4.0));
    }

    #[test]
    fn epsilon_grid_rules() {
        assert!(EpsilonGrid::new(vec![0.0, 0.5]).is_err());
        let e = EpsilonGrid::new(vec![0.1, 0.5, 1.0]).unwrap();
        assert_eq!(e.cap(), 1.0);
        assert_eq!(e.nearest(0.42), 1);
    }

    #[test]
    fn bins_cover_range() {
        let b = BudgetBinning::uniform(4, 1, 0.5).unwrap();
        assert_eq!(b.count(), 4);
        assert_eq!(b.bin_of(0.0), 0);
        assert_eq!(b.bin_of(0.25), 1);
        assert_eq!(b.bin_of(1.0), 3);
        assert!(BudgetBinning::new(vec![0.0, 0.5], 1, 0.5).is_err());
    }
}
