use super::cost::{check_ir, direct_cost, relaxed_cost, DirectCost, IrMargin};
use crate::error::{Error, Result};
use crate::market_core::{MarketInstance, OptimizerConfig};
use crate::rent_and_payments::{check_sufficient, delta_dic_certificate, synthesize, DicCertificate};
use crate::stopping_solver::{BudgetLattice, ReportSpace, Sigma, Threshold, ThresholdTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

pub const IR_TOL: f64 = 1e-9;
/// Number of slope choices in the affine family, spread over [−ε̄, ε̄].
pub const AFFINE_SLOPES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaFamily {
    FullTable,
    Separable,
    AffineInMeanReport,
}

impl std::str::FromStr for SigmaFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-table" => Ok(Self::FullTable),
            "separable" => Ok(Self::Separable),
            "affine-in-mean-report" => Ok(Self::AffineInMeanReport),
            _ => Err(Error::Argument(format!(
                "unknown sigma family {s:?} (expected full-table, separable or affine-in-mean-report)"
            ))),
        }
    }
}

/// Finite parameter space decoding to σ tables whose outputs lie in `allowed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaParametrization {
    pub family: SigmaFamily,
    /// ε indices candidates may use.
    pub allowed: Vec<usize>,
    /// Number of choices per coordinate.
    pub dims: Vec<usize>,
}

impl SigmaParametrization {
    pub fn new(inst: &MarketInstance, family: SigmaFamily, allowed: Option<&[usize]>) -> Result<Self> {
        let allowed: Vec<usize> = match allowed {
            Some(a) => a.to_vec(),
            None => (0..inst.eps.len()).collect(),
        };
        if let Some(&bad) = allowed.iter().find(|&&e| e >= inst.eps.len()) {
            return Err(Error::Validation(format!("allowed epsilon index {bad} is off the grid")));
        }
        let periods = inst.horizon + 1;
        let dims = match family {
            SigmaFamily::Separable => vec![allowed.len(); periods],
            SigmaFamily::FullTable => vec![allowed.len(); periods * ReportSpace::new(inst).cells()],
            SigmaFamily::AffineInMeanReport => (0..periods).flat_map(|_| [AFFINE_SLOPES, allowed.len()]).collect(),
        };
        Ok(Self { family, allowed, dims })
    }

    fn slope(&self, inst: &MarketInstance, j: usize) -> f64 {
        let cap = inst.eps.cap();
        -cap + 2.0 * cap * j as f64 / (AFFINE_SLOPES - 1) as f64
    }

    fn nearest_allowed(&self, inst: &MarketInstance, x: f64) -> usize {
        *self
            .allowed
            .iter()
            .min_by(|&&a, &&b| (inst.eps.get(a) - x).abs().total_cmp(&(inst.eps.get(b) - x).abs()))
            .expect("nonempty allowed set")
    }

    pub fn decode(&self, inst: &MarketInstance, params: &[usize]) -> Sigma {
        match self.family {
            SigmaFamily::Separable => {
                let per_t: Vec<usize> = params.iter().map(|&p| self.allowed[p]).collect();
                Sigma::separable(inst, &per_t)
            }
            SigmaFamily::FullTable => {
                let cells = ReportSpace::new(inst).cells();
                Sigma { table: params.chunks(cells).map(|row| row.iter().map(|&p| self.allowed[p]).collect()).collect() }
            }
            SigmaFamily::AffineInMeanReport => Sigma::from_fn(inst, |t, reps| {
                let slope = self.slope(inst, params[2 * t]);
                let intercept = inst.eps.get(self.allowed[params[2 * t + 1]]);
                let active: Vec<f64> = reps
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| {
                        r.map(|v| {
                            let g = inst.grid(i);
                            if g.len() < 2 {
                                0.0
                            } else {
                                (g.get(v) - g.lower()) / (g.upper() - g.lower())
                            }
                        })
                    })
                    .collect();
                let mean = if active.is_empty() { 0.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
                self.nearest_allowed(inst, intercept + slope * mean)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub start: usize,
    pub sweep: usize,
    pub coordinate: String,
    pub params: Vec<usize>,
    pub kappa: Vec<Vec<Threshold>>,
    pub relaxed_cost: f64,
    /// Smallest worst-type participation margin over owners.
    pub ir_margin: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    pub min_c1: f64,
    pub min_c2: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub family: SigmaFamily,
    pub params: Vec<usize>,
    pub sigma: Sigma,
    pub kappa: Vec<Vec<Threshold>>,
    pub relaxed_cost: f64,
    pub direct_cost: DirectCost,
    pub ir: Vec<IrMargin>,
    pub dic: DicSummary,
    pub certificate: DicCertificate,
    pub evaluations: Vec<Evaluation>,
}

impl OptimizationResult {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("eval,start,sweep,coordinate,params,kappa,relaxed_cost,ir_margin,feasible\n");
        for (n, e) in self.evaluations.iter().enumerate() {
            let params: Vec<String> = e.params.iter().map(|p| p.to_string()).collect();
            let kappa: Vec<String> = e
                .kappa
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|th| match th {
                            Threshold::At(k) => k.to_string(),
                            Threshold::Never => "never".into(),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let _ = writeln!(
                out,
                "{n},{},{},{},{},{},{},{},{}",
                e.start,
                e.sweep,
                e.coordinate,
                params.join(" "),
                kappa.join("|"),
                e.relaxed_cost,
                e.ir_margin,
                e.feasible
            );
        }
        out
    }
}

type Key = (Vec<usize>, Vec<Vec<Threshold>>);

struct Evaluator<'a> {
    inst: &'a MarketInstance,
    par: &'a SigmaParametrization,
    cache: HashMap<Key, (f64, f64)>,
}

impl Evaluator<'_> {
    fn score(inst: &MarketInstance, par: &SigmaParametrization, params: &[usize], kappa: &[Vec<Threshold>]) -> Result<(f64, f64)> {
        let sigma = par.decode(inst, params);
        let lattice = BudgetLattice::from_sigma(inst, &sigma);
        let tables: Vec<ThresholdTable> = kappa.iter().map(|d| ThresholdTable::from_design(d, &lattice)).collect();
        let cost = relaxed_cost(inst, &sigma, &tables)?;
        let syn = synthesize(inst, &sigma, kappa)?;
        let ir = check_ir(inst, &syn.solution).iter().map(|m| m.worst_type).fold(f64::INFINITY, f64::min);
        Ok((cost, ir))
    }

    /// Scores candidates in parallel, reusing cached results.
    fn batch(&mut self, cands: &[Key]) -> Result<Vec<(f64, f64)>> {
        let missing: Vec<&Key> = cands.iter().filter(|c| !self.cache.contains_key(*c)).collect();
        let (inst, par) = (self.inst, self.par);
        let scored: Vec<Result<(f64, f64)>> = missing.par_iter().map(|(p, k)| Self::score(inst, par, p, k)).collect();
        for (key, s) in missing.into_iter().zip(scored) {
            self.cache.insert(key.clone(), s?);
        }
        Ok(cands.iter().map(|c| self.cache[c]).collect())
    }
}

/// Coordinate descent with multi-start over σ parameters and, unless
/// `fixed_kappa` is given, per-period thresholds for every owner.
pub fn optimize(
    inst: &MarketInstance,
    par: &SigmaParametrization,
    config: &OptimizerConfig,
    fixed_kappa: Option<&[Vec<Threshold>]>,
) -> Result<OptimizationResult> {
    const INFEASIBLE: &str = "infeasible under parametrization";
    if par.allowed.is_empty() {
        return Err(Error::Infeasible(INFEASIBLE.into()));
    }
    let horizon = inst.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ev = Evaluator { inst, par, cache: HashMap::new() };
    let mut log: Vec<Evaluation> = Vec::new();
    let kappa_choices = |i: usize| -> Vec<Threshold> {
        let mut c: Vec<Threshold> = (0..inst.grid(i).len()).map(Threshold::At).collect();
        c.push(Threshold::Never);
        c
    };
    let feasible = |ir: f64| ir >= -IR_TOL;

    for start in 0..config.starts.max(1) {
        let mut params: Vec<usize> = if start == 0 {
            par.dims.iter().map(|&d| d / 2).collect()
        } else {
            par.dims.iter().map(|&d| rng.gen_range(0..d)).collect()
        };
        let mut kappa: Vec<Vec<Threshold>> = match fixed_kappa {
            Some(k) => k.to_vec(),
            None => (0..inst.n())
                .map(|i| {
                    let ch = kappa_choices(i);
                    (0..=horizon)
                        .map(|t| {
                            if t == horizon {
                                Threshold::At(0)
                            } else if start == 0 {
                                Threshold::Never
                            } else {
                                ch[rng.gen_range(0..ch.len())]
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        let (mut cost, mut ir) = ev.batch(&[(params.clone(), kappa.clone())])?[0];
        log.push(Evaluation {
            start,
            sweep: 0,
            coordinate: "start".into(),
            params: params.clone(),
            kappa: kappa.clone(),
            relaxed_cost: cost,
            ir_margin: ir,
            feasible: feasible(ir),
        });
        for sweep in 1..=config.sweeps {
            let before = (cost, feasible(ir));
            // σ coordinates, then κ coordinates
            let mut coords: Vec<(String, Vec<Key>)> = Vec::new();
            for c in 0..par.dims.len() {
                coords.push((format!("sigma[{c}]"), Vec::new()));
            }
            if fixed_kappa.is_none() {
                for i in 0..inst.n() {
                    for t in 0..horizon {
                        coords.push((format!("kappa[{i}][{t}]"), Vec::new()));
                    }
                }
            }
            for (ci, (name, _)) in coords.iter().enumerate() {
                let cands: Vec<Key> = if ci < par.dims.len() {
                    (0..par.dims[ci])
                        .filter(|&x| x != params[ci])
                        .map(|x| {
                            let mut p = params.clone();
                            p[ci] = x;
                            (p, kappa.clone())
                        })
                        .collect()
                } else {
                    let j = ci - par.dims.len();
                    let (i, t) = (j / horizon, j % horizon);
                    kappa_choices(i)
                        .into_iter()
                        .filter(|&th| th != kappa[i][t])
                        .map(|th| {
                            let mut k = kappa.clone();
                            k[i][t] = th;
                            (params.clone(), k)
                        })
                        .collect()
                };
                let scores = ev.batch(&cands)?;
                for (cand, &(c, m)) in cands.iter().zip(&scores) {
                    log.push(Evaluation {
                        start,
                        sweep,
                        coordinate: name.clone(),
                        params: cand.0.clone(),
                        kappa: cand.1.clone(),
                        relaxed_cost: c,
                        ir_margin: m,
                        feasible: feasible(m),
                    });
                }
                let best = cands
                    .iter()
                    .zip(&scores)
                    .filter(|(_, s)| feasible(s.1))
                    .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
                if let Some((cand, &(c, m))) = best {
                    if !feasible(ir) || c < cost - config.tolerance {
                        params = cand.0.clone();
                        kappa = cand.1.clone();
                        cost = c;
                        ir = m;
                    }
                }
            }
            if before.1 && feasible(ir) && before.0 - cost <= config.tolerance {
                break;
            }
        }
    }

    let best = log
        .iter()
        .filter(|e| e.feasible)
        .min_by(|a, b| a.relaxed_cost.total_cmp(&b.relaxed_cost))
        .ok_or_else(|| Error::Infeasible(INFEASIBLE.into()))?;
    let sigma = par.decode(inst, &best.params);
    let syn = synthesize(inst, &sigma, &best.kappa)?;
    let direct = direct_cost(inst, &syn.rules, &syn.thresholds)?;
    let ir = check_ir(inst, &syn.solution);
    let suf = check_sufficient(inst, &syn)?;
    let certificate = delta_dic_certificate(inst, &syn)?;
    Ok(OptimizationResult {
        family: par.family,
        params: best.params.clone(),
        sigma,
        kappa: best.kappa.clone(),
        relaxed_cost: best.relaxed_cost,
        direct_cost: direct,
        ir,
        dic: DicSummary { min_c1: suf.min_c1, min_c2: suf.min_c2, passes: suf.passes },
        certificate,
        evaluations: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_core::{sticky_kernel, BudgetBinning, EpsilonGrid, OwnerSpec, ValueGrid};

    fn owner_instance(grid: Vec<f64>, l: f64) -> MarketInstance {
        let horizon = 1;
        let eps = EpsilonGrid::new(vec![0.1, 0.5, 1.0]).unwrap();
        let bins = BudgetBinning::uniform(1, horizon, eps.cap()).unwrap();
        let owner = OwnerSpec {
            label: "o".into(),
            kernel: sticky_kernel(0.5, grid.len(), horizon, 1, None).unwrap(),
            grid: ValueGrid::new(grid).unwrap(),
            budget: 0.0,
        };
        MarketInstance::new(horizon, vec![owner], l, 0.0, eps, bins, false).unwrap()
    }

    fn config(seed: u64) -> OptimizerConfig {
        OptimizerConfig { starts: 3, sweeps: 6, seed, ..OptimizerConfig::default() }
    }

    /// Exhaustive sweep of the separable family under never-stop thresholds.
    fn sweep_best(inst: &MarketInstance) -> Vec<usize> {
        let never = vec![vec![Threshold::Never, Threshold::At(0)]];
        let mut best = (f64::INFINITY, vec![]);
        for a in 0..3 {
            for b in 0..3 {
                let sigma = Sigma::separable(inst, &[a, b]);
                let lat = BudgetLattice::from_sigma(inst, &sigma);
                let c = relaxed_cost(inst, &sigma, &[ThresholdTable::from_design(&never[0], &lat)]).unwrap();
                if c < best.0 {
                    best = (c, vec![a, b]);
                }
            }
        }
        best.1
    }

    fn optimal_eps(inst: &MarketInstance) -> Vec<usize> {
        let par = SigmaParametrization::new(inst, SigmaFamily::Separable, None).unwrap();
        let never = vec![vec![Threshold::Never, Threshold::At(0)]];
        let res = optimize(inst, &par, &config(0), Some(&never)).unwrap();
        res.params.iter().map(|&p| par.allowed[p]).collect()
    }

    #[test]
    fn accuracy_dominated_market_buys_the_most_loss() {
        let inst = owner_instance(vec![0.001, 0.002, 0.003], 5.0);
        assert_eq!(sweep_best(&inst), vec![2, 2]);
        assert_eq!(optimal_eps(&inst), vec![2, 2]);
    }

    #[test]
    fn compensation_dominated_market_buys_the_least() {
        let inst = owner_instance(vec![1.0, 2.0, 3.0], 1e-4);
        assert_eq!(sweep_best(&inst), vec![0, 0]);
        assert_eq!(optimal_eps(&inst), vec![0, 0]);
    }

    #[test]
    fn optimal_eps_rises_with_l() {
        let mut prev = vec![0, 0];
        for l in [0.5, 2.0, 8.0] {
            let inst = owner_instance(vec![1.0, 1.5, 2.0], l);
            let eps = optimal_eps(&inst);
            assert_eq!(eps, sweep_best(&inst));
            assert!(eps.iter().zip(&prev).all(|(a, b)| a >= b), "L={l}: {eps:?} after {prev:?}");
            prev = eps;
        }
    }

    #[test]
    fn result_is_deterministic_and_minimal() {
        let inst = crate::fixtures::two_owner_t1();
        let par = SigmaParametrization::new(&inst, SigmaFamily::AffineInMeanReport, None).unwrap();
        let a = optimize(&inst, &par, &config(11), None).unwrap();
        let b = optimize(&inst, &par, &config(11), None).unwrap();
        assert_eq!(a, b);
        for e in a.evaluations.iter().filter(|e| e.feasible) {
            assert!(a.relaxed_cost <= e.relaxed_cost);
        }
        assert_eq!(a.log_csv().lines().count(), a.evaluations.len() + 1);
        assert!(a.ir.iter().all(|m| m.worst_type >= -IR_TOL));
    }

    #[test]
    fn empty_family_is_infeasible() {
        let inst = owner_instance(vec![1.0, 2.0], 1.0);
        let par = SigmaParametrization::new(&inst, SigmaFamily::Separable, Some(&[])).unwrap();
        match optimize(&inst, &par, &config(0), None) {
            Err(Error::Infeasible(msg)) => assert_eq!(msg, "infeasible under parametrization"),
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(SigmaParametrization::new(&inst, SigmaFamily::Separable, Some(&[7])).is_err());
    }

    #[test]
    fn family_decoding() {
        let inst = owner_instance(vec![1.0, 2.0, 3.0], 1.0);
        assert_eq!("full-table".parse::<SigmaFamily>().unwrap(), SigmaFamily::FullTable);
        assert!("banana".parse::<SigmaFamily>().is_err());
        let full = SigmaParametrization::new(&inst, SigmaFamily::FullTable, Some(&[0, 2])).unwrap();
        assert_eq!(full.dims, vec![2; 8]);
        let s = full.decode(&inst, &[1, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(s.table, vec![vec![2, 0, 0, 0], vec![0, 0, 0, 2]]);
        let aff = SigmaParametrization::new(&inst, SigmaFamily::AffineInMeanReport, None).unwrap();
        assert_eq!(aff.dims, vec![AFFINE_SLOPES, 3, AFFINE_SLOPES, 3]);
        // steepest negative slope from the top intercept: ε̄ at v̲, ε̄ − ε̄ = 0 → 0.1 at v̄
        let s = aff.decode(&inst, &[0, 2, AFFINE_SLOPES / 2, 1]);
        assert_eq!(s.table[0][..3], [2, 1, 0]);
        assert!(s.table[1][..3].iter().all(|&e| e == 1));
    }
}
