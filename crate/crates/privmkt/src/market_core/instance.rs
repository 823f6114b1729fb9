use super::grid::{BudgetBinning, EpsilonGrid, ValueGrid};
use super::kernel::{drift_kernel, sticky_kernel, uniform_kernel, validate_kernel, KernelReport, TransitionKernel};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerSpec {
    /// Opaque intrinsic-preference label.
    pub label: String,
    pub grid: ValueGrid,
    pub kernel: TransitionKernel,
    /// Tolerance B = λ(c) on accumulated loss.
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Restricts the ε indices a candidate σ may use; `None` allows the whole grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_eps: Option<Vec<usize>>,
}

fn default_family() -> String {
    "separable".into()
}
fn default_starts() -> usize {
    3
}
fn default_sweeps() -> usize {
    10
}
fn default_tolerance() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            family: default_family(),
            starts: default_starts(),
            sweeps: default_sweeps(),
            seed: 0,
            tolerance: default_tolerance(),
            allowed_eps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    /// Final period index T; periods are 0..=T.
    pub horizon: usize,
    pub owners: Vec<OwnerSpec>,
    pub l: f64,
    pub b: f64,
    pub eps: EpsilonGrid,
    pub bins: BudgetBinning,
    pub commitment_gating: bool,
    pub optimizer: Option<OptimizerConfig>,
}

impl MarketInstance {
    pub fn new(
        horizon: usize,
        owners: Vec<OwnerSpec>,
        l: f64,
        b: f64,
        eps: EpsilonGrid,
        bins: BudgetBinning,
        commitment_gating: bool,
    ) -> Result<Self> {
        let inst = Self { horizon, owners, l, b, eps, bins, commitment_gating, optimizer: None };
        inst.check()?;
        Ok(inst)
    }

    fn check(&self) -> Result<()> {
        if self.owners.is_empty() {
            return Err(Error::Validation("instance has no owners".into()));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::Validation(format!("L must be finite and > 0, got {}", self.l)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::Validation(format!("b must be finite and >= 0, got {}", self.b)));
        }
        for (i, o) in self.owners.iter().enumerate() {
            if !(o.budget >= 0.0) {
                return Err(Error::Validation(format!("owner {i}: budget must be >= 0")));
            }
            o.kernel
                .check_shape(self.horizon, o.grid.len(), self.bins.count())
                .map_err(|e| Error::Structural(format!("owner {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.owners.len()
    }

    pub fn grid(&self, i: usize) -> &ValueGrid {
        &self.owners[i].grid
    }

    pub fn kernel(&self, i: usize) -> &TransitionKernel {
        &self.owners[i].kernel
    }

    pub fn with_l(&self, l: f64) -> Self {
        Self { l, ..self.clone() }
    }

    pub fn validate_kernels(&self) -> Result<Vec<KernelReport>> {
        self.owners.iter().map(|o| validate_kernel(&o.kernel)).collect()
    }

    pub fn kernels_valid(&self) -> bool {
        self.validate_kernels().map(|r| r.iter().all(|k| k.is_valid())).unwrap_or(false)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(s)?;
        file.build()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

// ---- file format ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub horizon: usize,
    pub owners: Vec<OwnerFile>,
    pub epsilon_grid: Vec<f64>,
    pub budget_bins: BinsSpec,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub commitment_gating: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    /// Permits single-point value grids.
    #[serde(default)]
    pub degenerate_test_mode: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BinsSpec {
    Count(usize),
    Edges { edges: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerFile {
    #[serde(default)]
    pub label: String,
    pub grid: Vec<f64>,
    pub kernel: KernelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub budget: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Table { table: KernelTable },
    Generator(GeneratorSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTable {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorSpec {
    Uniform,
    Sticky {
        p: f64,
    },
    Drift {
        delta: f64,
        #[serde(default)]
        width: Option<f64>,
        #[serde(default)]
        budget_drift: f64,
    },
}

impl InstanceFile {
    pub fn build(&self) -> Result<MarketInstance> {
        let eps = EpsilonGrid::new(self.epsilon_grid.clone())?;
        let bins = match &self.budget_bins {
            BinsSpec::Count(c) => BudgetBinning::uniform(*c, self.horizon, eps.cap())?,
            BinsSpec::Edges { edges } => BudgetBinning::new(edges.clone(), self.horizon, eps.cap())?,
        };
        let mut owners = Vec::with_capacity(self.owners.len());
        for (i, o) in self.owners.iter().enumerate() {
            let grid = if o.grid.len() == 1 && self.degenerate_test_mode {
                ValueGrid::degenerate(o.grid[0])
            } else {
                ValueGrid::new(o.grid.clone())
            }
            .map_err(|e| Error::Validation(format!("owner {i}: {e}")))?;
            let m = grid.len();
            if let Some(init) = &o.initial {
                if init.len() != m {
                    return Err(Error::Structural(format!("owner {i}: initial has {} entries, expected {m}", init.len())));
                }
            }
            let kernel = match &o.kernel {
                KernelSpec::Table { table } => {
                    TransitionKernel { initial: table.initial.clone(), transitions: table.transitions.clone() }
                }
                KernelSpec::Generator(GeneratorSpec::Uniform) => {
                    uniform_kernel(m, self.horizon, bins.count(), o.initial.clone())
                }
                KernelSpec::Generator(GeneratorSpec::Sticky { p }) => {
                    sticky_kernel(*p, m, self.horizon, bins.count(), o.initial.clone())?
                }
                KernelSpec::Generator(GeneratorSpec::Drift { delta, width, budget_drift }) => {
                    drift_kernel(&grid, &bins, self.horizon, *delta, *width, *budget_drift, o.initial.clone())?
                }
            };
            owners.push(OwnerSpec { label: o.label.clone(), grid, kernel, budget: o.budget });
        }
        let mut inst = MarketInstance::new(self.horizon, owners, self.l, self.b, eps, bins, self.commitment_gating)?;
        inst.optimizer = self.optimizer.clone();
        Ok(inst)
    }
}
