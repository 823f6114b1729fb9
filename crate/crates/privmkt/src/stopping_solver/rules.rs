use crate::error::{Error, Result};
use crate::market_core::MarketInstance;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Mixed-radix encoding of joint reports. Owner i's digit ranges over its
/// value indices plus one reserved "departed" symbol equal to its grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpace {
    radix: Vec<usize>,
    stride: Vec<usize>,
}

impl ReportSpace {
    pub fn new(inst: &MarketInstance) -> Self {
        let radix: Vec<usize> = inst.owners.iter().map(|o| o.grid.len() + 1).collect();
        let mut stride = Vec::with_capacity(radix.len());
        let mut s = 1;
        for &r in &radix {
            stride.push(s);
            s *= r;
        }
        Self { radix, stride }
    }

    pub fn cells(&self) -> usize {
        self.radix.iter().product()
    }

    pub fn stride(&self, i: usize) -> usize {
        self.stride[i]
    }

    pub fn departed(&self, i: usize) -> usize {
        self.radix[i] - 1
    }

    pub fn digit(&self, cell: usize, i: usize) -> usize {
        (cell / self.stride[i]) % self.radix[i]
    }

    /// Reports per owner, `None` for departed.
    pub fn decode(&self, cell: usize) -> Vec<Option<usize>> {
        (0..self.radix.len())
            .map(|i| {
                let d = self.digit(cell, i);
                (d != self.departed(i)).then_some(d)
            })
            .collect()
    }

    pub fn encode(&self, reports: &[Option<usize>]) -> usize {
        reports
            .iter()
            .enumerate()
            .map(|(i, r)| r.unwrap_or(self.departed(i)) * self.stride[i])
            .sum()
    }
}

/// Assignment rule: `table[t][cell]` is an index into the ε grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma {
    pub table: Vec<Vec<usize>>,
}

impl Sigma {
    pub fn from_fn<F: FnMut(usize, &[Option<usize>]) -> usize>(inst: &MarketInstance, mut f: F) -> Self {
        let space = ReportSpace::new(inst);
        let table = (0..=inst.horizon)
            .map(|t| (0..space.cells()).map(|c| f(t, &space.decode(c))).collect())
            .collect();
        Self { table }
    }

    pub fn constant(inst: &MarketInstance, e: usize) -> Self {
        Self::from_fn(inst, |_, _| e)
    }

    pub fn separable(inst: &MarketInstance, per_t: &[usize]) -> Self {
        Self::from_fn(inst, |t, _| per_t[t])
    }

    pub fn check(&self, inst: &MarketInstance) -> Result<()> {
        let cells = ReportSpace::new(inst).cells();
        if self.table.len() != inst.horizon + 1 {
            return Err(Error::Structural(format!("sigma has {} periods, expected {}", self.table.len(), inst.horizon + 1)));
        }
        for (t, row) in self.table.iter().enumerate() {
            if row.len() != cells {
                return Err(Error::Structural(format!("sigma t={t}: {} cells, expected {cells}", row.len())));
            }
            if let Some(c) = row.iter().position(|&e| e >= inst.eps.len()) {
                return Err(Error::Structural(format!("sigma t={t} cell {c}: index off the epsilon grid")));
            }
        }
        Ok(())
    }

    pub fn is_report_independent(&self) -> bool {
        self.table.iter().all(|row| row.iter().all(|&e| e == row[0]))
    }
}

/// Reachable accumulated losses at the start of each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLattice {
    pub levels: Vec<Vec<f64>>,
}

const LEVEL_TOL: f64 = 1e-9;

impl BudgetLattice {
    pub fn from_sigma(inst: &MarketInstance, sigma: &Sigma) -> Self {
        let mut levels = vec![vec![0.0]];
        for t in 0..inst.horizon {
            let mut used: Vec<usize> = sigma.table[t].clone();
            used.sort_unstable();
            used.dedup();
            let mut next: Vec<f64> = levels[t]
                .iter()
                .flat_map(|&c| used.iter().map(move |&e| c + inst.eps.get(e)))
                .collect();
            next.sort_by(f64::total_cmp);
            next.dedup_by(|a, b| (*a - *b).abs() <= LEVEL_TOL);
            levels.push(next);
        }
        Self { levels }
    }

    pub fn len(&self, t: usize) -> usize {
        self.levels[t].len()
    }

    pub fn level(&self, t: usize, k: usize) -> f64 {
        self.levels[t][k]
    }

    pub fn index(&self, t: usize, c: f64) -> Option<usize> {
        let lv = &self.levels[t];
        let pos = lv.partition_point(|&x| x < c - LEVEL_TOL);
        (pos < lv.len() && (lv[pos] - c).abs() <= LEVEL_TOL).then_some(pos)
    }
}

/// Stopping threshold on the value-grid index, or the never-stop sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Threshold {
    At(usize),
    Never,
}

impl Threshold {
    pub fn admits(self, v: usize) -> bool {
        matches!(self, Threshold::At(k) if v >= k)
    }

    /// Index used when a finite cap is needed: the top point for `Never`.
    pub fn cap_index(self, top: usize) -> usize {
        match self {
            Threshold::At(k) => k,
            Threshold::Never => top,
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::At(k) => s.serialize_u64(*k as u64),
            Threshold::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Idx(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Idx(k) => Ok(Threshold::At(k)),
            Raw::Word(w) if w == "never" => Ok(Threshold::Never),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected index or \"never\", got {w:?}"))),
        }
    }
}

/// Per-owner thresholds indexed `[t][lattice level]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub kl: Vec<Vec<Threshold>>,
    pub kr: Vec<Vec<Threshold>>,
}

impl ThresholdTable {
    /// Level-independent table from one threshold per period; t = T is forced to v̲.
    pub fn from_design(design: &[Threshold], lattice: &BudgetLattice) -> Self {
        let horizon = lattice.levels.len() - 1;
        let kl: Vec<Vec<Threshold>> = (0..=horizon)
            .map(|t| {
                let th = if t == horizon { Threshold::At(0) } else { design[t] };
                vec![th; lattice.len(t)]
            })
            .collect();
        Self { kr: kl.clone(), kl }
    }

    pub fn never(lattice: &BudgetLattice) -> Self {
        let design = vec![Threshold::Never; lattice.levels.len()];
        Self::from_design(&design, lattice)
    }
}

/// The buyer's offer ⟨σ, β, θ, ρ⟩. Payment tables are indexed
/// `[owner][t][lattice level][cell]`; ρ is `[owner][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRules {
    pub sigma: Sigma,
    pub lattice: BudgetLattice,
    pub beta: Vec<Vec<Vec<Vec<f64>>>>,
    pub theta: Vec<Vec<Vec<Vec<f64>>>>,
    pub rho: Vec<Vec<f64>>,
}

impl MechanismRules {
    pub fn zero_payments(inst: &MarketInstance, sigma: Sigma) -> Self {
        let lattice = BudgetLattice::from_sigma(inst, &sigma);
        let cells = ReportSpace::new(inst).cells();
        let table: Vec<Vec<Vec<Vec<f64>>>> = (0..inst.n())
            .map(|_| (0..=inst.horizon).map(|t| vec![vec![0.0; cells]; lattice.len(t)]).collect())
            .collect();
        Self { sigma, lattice, beta: table.clone(), theta: table, rho: vec![vec![0.0; inst.horizon + 1]; inst.n()] }
    }

    pub fn check(&self, inst: &MarketInstance) -> Result<()> {
        self.sigma.check(inst)?;
        if self.lattice != BudgetLattice::from_sigma(inst, &self.sigma) {
            return Err(Error::Structural("budget lattice does not match sigma".into()));
        }
        let cells = ReportSpace::new(inst).cells();
        for (name, tab) in [("beta", &self.beta), ("theta", &self.theta)] {
            if tab.len() != inst.n() {
                return Err(Error::Structural(format!("{name}: {} owners, expected {}", tab.len(), inst.n())));
            }
            for (i, per_t) in tab.iter().enumerate() {
                if per_t.len() != inst.horizon + 1 {
                    return Err(Error::Structural(format!("{name} owner {i}: wrong period count")));
                }
                for (t, per_k) in per_t.iter().enumerate() {
                    if per_k.len() != self.lattice.len(t) || per_k.iter().any(|r| r.len() != cells) {
                        return Err(Error::Structural(format!("{name} owner {i} t={t}: wrong shape")));
                    }
                }
            }
        }
        if self.rho.len() != inst.n() || self.rho.iter().any(|r| r.len() != inst.horizon + 1) {
            return Err(Error::Structural("rho: wrong shape".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn report_space_roundtrip() {
        let inst = fixtures::two_owner_t1();
        let sp = ReportSpace::new(&inst);
        assert_eq!(sp.cells(), 16);
        for c in 0..sp.cells() {
            assert_eq!(sp.encode(&sp.decode(c)), c);
        }
        assert_eq!(sp.decode(sp.encode(&[Some(2), None])), vec![Some(2), None]);
    }

    #[test]
    fn lattice_levels() {
        let inst = fixtures::two_owner_t1();
        let sigma = Sigma::from_fn(&inst, |_, r| if r[0] == Some(0) { 0 } else { 1 });
        let lat = BudgetLattice::from_sigma(&inst, &sigma);
        assert_eq!(lat.levels[0], vec![0.0]);
        assert_eq!(lat.levels[1].len(), 2);
        assert_eq!(lat.index(1, inst.eps.get(1)), Some(1));
        assert_eq!(lat.index(1, 0.123456), None);
    }

    #[test]
    fn threshold_serde() {
        let v = vec![Threshold::At(2), Threshold::Never];
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[2,\"never\"]");
        let back: Vec<Threshold> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Threshold>("\"sometimes\"").is_err());
    }
}
