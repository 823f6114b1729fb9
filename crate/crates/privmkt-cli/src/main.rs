use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use privmkt::buyer_optimizer::{direct_cost, optimize, SigmaFamily, SigmaParametrization};
use privmkt::dic_oracle::max_deviation_gain;
use privmkt::market_core::MarketInstance;
use privmkt::rent_and_payments::{
    check_necessary, check_sufficient, delta_dic_certificate, synthesize, zero_rho_threshold_solve, RentTable,
    Synthesis, Verdict,
};
use privmkt::simulator::{monte_carlo, traces_csv};
use privmkt::stopping_solver::{
    build_beliefs, solution_csv, solve_fixed_point, thresholds_json, BeliefModel, BudgetLattice, MechanismRules,
    OwnerModel, Sigma, Threshold,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "privmkt", version, about = "Dynamic privacy-market mechanism engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the instance file and its transition kernels.
    Validate { instance: PathBuf },
    /// Solve each owner's stopping problem under given or zero payments.
    Solve(SolveArgs),
    /// Synthesize β, θ and ρ for σ and threshold designs.
    Synthesize(DesignArgs),
    /// Brute-force deviation gains of a mechanism.
    Verify(VerifyArgs),
    /// Incentive margins and the δ certificate of synthesized rules.
    Certify(DesignArgs),
    /// Search assignment rules and thresholds for the lowest relaxed cost.
    Optimize(OptimizeArgs),
    /// Monte Carlo runs of the market.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct Common {
    instance: PathBuf,
    /// Output directory (defaults to $PRIVMKT_OUT, then ./privmkt-out).
    #[arg(long, env = "PRIVMKT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DesignArgs {
    #[command(flatten)]
    common: Common,
    /// σ source: a JSON file, `constant:<i>`, `separable:<i>,<j>,...` or `monotone`.
    #[arg(long)]
    sigma: String,
    /// Threshold design: a JSON file `[[t0, t1, ...], ...]` per owner, or `auto` for zero-ρ thresholds.
    #[arg(long, default_value = "auto")]
    kappa: String,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    sigma: Option<String>,
    /// Rule tables written by `synthesize`; zero payments for --sigma otherwise.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long, default_value = "auto")]
    kappa: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Also search history-dependent deviation strategies (small instances only).
    #[arg(long)]
    multi_period: bool,
    /// Exit with status 1 when the largest gain exceeds this value.
    #[arg(long)]
    fail_on_gain: Option<f64>,
}

#[derive(Args, Clone)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long, default_value = "auto")]
    kappa: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Retain and export the first N traces.
    #[arg(long, default_value_t = 0)]
    keep_traces: usize,
}

#[derive(Serialize)]
struct RunManifest {
    instance: String,
    command: String,
    args: Vec<String>,
    seed: Option<u64>,
    out_dir: String,
    version: &'static str,
    started_unix_ms: u128,
    wall_clock_ms: u128,
}

/// Failure carrying the process exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use privmkt::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Parse(_) | E::Io(_) | E::Argument(_)) => 2,
        Some(E::Capacity(_)) => 3,
        Some(_) => 1,
        None => 2,
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: exit_code(&err), err }
    }
}

impl From<privmkt::Error> for Failure {
    fn from(err: privmkt::Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn semantic(msg: String) -> Failure {
    Failure { code: 1, err: anyhow!(msg) }
}

fn load(path: &Path) -> Result<MarketInstance, Failure> {
    MarketInstance::from_path(path).map_err(|e| {
        let code = if matches!(e, privmkt::Error::Parse(_) | privmkt::Error::Io(_)) { 2 } else { 1 };
        Failure { code, err: anyhow::Error::from(e).context(format!("loading {}", path.display())) }
    })
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("privmkt-out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).context("serializing output")?;
    std::fs::write(dir.join(name), text + "\n").with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    std::fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn parse_sigma(inst: &MarketInstance, arg: &str) -> Result<Sigma, Failure> {
    let sigma = if let Some(i) = arg.strip_prefix("constant:") {
        Sigma::constant(inst, i.trim().parse().map_err(|_| usage(format!("bad constant sigma {arg:?}")))?)
    } else if let Some(list) = arg.strip_prefix("separable:") {
        let per_t: Vec<usize> = list
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| usage(format!("bad separable sigma {arg:?}")))?;
        if per_t.len() != inst.horizon + 1 {
            return Err(usage(format!("separable sigma needs {} entries", inst.horizon + 1)));
        }
        Sigma::separable(inst, &per_t)
    } else if arg == "monotone" {
        monotone_sigma(inst)
    } else {
        let text = std::fs::read_to_string(arg).with_context(|| format!("reading sigma file {arg}"))?;
        serde_json::from_str(&text).map_err(privmkt::Error::from)?
    };
    sigma.check(inst)?;
    Ok(sigma)
}

/// ε decreasing in the mean normalized active report.
fn monotone_sigma(inst: &MarketInstance) -> Sigma {
    let top = inst.eps.len() - 1;
    Sigma::from_fn(inst, |_, reps| {
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
        if active.is_empty() {
            return 0;
        }
        let mean = active.iter().sum::<f64>() / active.len() as f64;
        ((1.0 - mean) * top as f64).round() as usize
    })
}

fn usage(msg: String) -> Failure {
    Failure { code: 2, err: anyhow!(msg) }
}

/// Per-owner, per-period threshold design.
fn parse_kappa(inst: &MarketInstance, sigma: &Sigma, arg: &str) -> Result<(Vec<Vec<Threshold>>, Vec<String>), Failure> {
    if arg == "auto" {
        let lattice = BudgetLattice::from_sigma(inst, sigma);
        let beliefs = build_beliefs(inst, sigma, &lattice, None);
        let mut design = Vec::new();
        let mut notes = Vec::new();
        for i in 0..inst.n() {
            let model = OwnerModel::new(inst, i, sigma, &lattice, &beliefs);
            let rents = RentTable::build(&model)?;
            let solved = zero_rho_threshold_solve(&model, &rents);
            for (t, k) in solved.iter().enumerate() {
                if k.is_none() {
                    notes.push(format!("owner {i}: no zero-rho threshold at t={t}; using never"));
                }
            }
            design.push(solved.into_iter().map(|k| k.unwrap_or(Threshold::Never)).collect());
        }
        return Ok((design, notes));
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("reading kappa file {arg}"))?;
    let design: Vec<Vec<Threshold>> = serde_json::from_str(&text).map_err(privmkt::Error::from)?;
    if design.len() != inst.n() || design.iter().any(|d| d.len() < inst.horizon) {
        return Err(usage(format!("kappa file needs {} owners with at least {} periods", inst.n(), inst.horizon)));
    }
    Ok((design, Vec::new()))
}

fn synthesized(inst: &MarketInstance, sigma: &str, kappa: &str) -> Result<(Synthesis, Vec<String>), Failure> {
    let sigma = parse_sigma(inst, sigma)?;
    let (design, notes) = parse_kappa(inst, &sigma, kappa)?;
    Ok((synthesize(inst, &sigma, &design)?, notes))
}

/// Rules, beliefs and the solved equilibrium from either a rules file or σ/κ.
struct Mechanism {
    rules: MechanismRules,
    beliefs: BeliefModel,
    solution: privmkt::stopping_solver::ValueSolution,
    thresholds: Vec<privmkt::stopping_solver::ThresholdTable>,
    warnings: Vec<String>,
}

fn mechanism(inst: &MarketInstance, rules: Option<&Path>, sigma: Option<&str>, kappa: &str) -> Result<Mechanism, Failure> {
    if let Some(path) = rules {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rules: MechanismRules = serde_json::from_str(&text).map_err(privmkt::Error::from)?;
        let fp = solve_fixed_point(inst, &rules)?;
        return Ok(Mechanism {
            rules,
            beliefs: fp.beliefs,
            solution: fp.solution,
            thresholds: fp.thresholds,
            warnings: fp.warnings,
        });
    }
    let sigma = sigma.ok_or_else(|| usage("either --rules or --sigma is required".into()))?;
    let (syn, mut notes) = synthesized(inst, sigma, kappa)?;
    notes.extend(syn.warnings);
    Ok(Mechanism {
        rules: syn.rules,
        beliefs: syn.beliefs,
        solution: syn.solution,
        thresholds: syn.thresholds,
        warnings: notes,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (name, common, seed) = match &cli.command {
        Command::Validate { instance } => {
            return validate(instance);
        }
        Command::Solve(a) => ("solve", a.common.clone(), None),
        Command::Synthesize(a) | Command::Certify(a) => {
            (if matches!(cli.command, Command::Synthesize(_)) { "synthesize" } else { "certify" }, a.common.clone(), None)
        }
        Command::Verify(a) => ("verify", a.common.clone(), None),
        Command::Optimize(a) => ("optimize", a.common.clone(), a.seed),
        Command::Simulate(a) => ("simulate", a.common.clone(), Some(a.seed)),
    };
    let inst = load(&common.instance)?;
    let dir = out_dir(&common)?;
    let outcome = match &cli.command {
        Command::Validate { .. } => unreachable!(),
        Command::Solve(a) => solve(&inst, a, &dir),
        Command::Synthesize(a) => synthesize_cmd(&inst, a, &dir),
        Command::Certify(a) => certify(&inst, a, &dir),
        Command::Verify(a) => verify(&inst, a, &dir),
        Command::Optimize(a) => optimize_cmd(&inst, a, &dir),
        Command::Simulate(a) => simulate(&inst, a, &dir),
    };
    let manifest = RunManifest {
        instance: common.instance.display().to_string(),
        command: name.into(),
        args,
        seed,
        out_dir: dir.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_ms: started,
        wall_clock_ms: clock.elapsed().as_millis(),
    };
    write_json(&dir, "manifest.json", &manifest)?;
    outcome
}

fn validate(path: &Path) -> Result<(), Failure> {
    let inst = load(path)?;
    let reports = inst.validate_kernels()?;
    let mut clean = true;
    for (i, r) in reports.iter().enumerate() {
        for v in &r.normalization {
            clean = false;
            println!("owner {i}: row does not sum to one: {v:?}");
        }
        for v in &r.support {
            clean = false;
            println!("owner {i}: zero-probability entry: {v:?}");
        }
        if let Some(v) = &r.fosd {
            clean = false;
            println!(
                "owner {i}: FOSD violation at t={} bin={} rows {}<{} grid index {} (excess {:.3e})",
                v.t, v.bin, v.v_low, v.v_high, v.grid_index, v.excess
            );
        }
    }
    if !clean {
        return Err(semantic(format!("{} failed kernel validation", path.display())));
    }
    println!("{}: ok ({} owners, T = {})", path.display(), inst.n(), inst.horizon);
    Ok(())
}

fn solve(inst: &MarketInstance, a: &SolveArgs, dir: &Path) -> Result<(), Failure> {
    let rules = match (&a.rules, &a.sigma) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(privmkt::Error::from)?
        }
        (None, Some(s)) => MechanismRules::zero_payments(inst, parse_sigma(inst, s)?),
        (None, None) => return Err(usage("solve needs --rules or --sigma".into())),
    };
    let fp = solve_fixed_point(inst, &rules)?;
    write_text(dir, "solution.csv", &solution_csv(inst, &rules.lattice, &fp.solution))?;
    write_json(dir, "solution.json", &fp.solution)?;
    write_json(dir, "thresholds.json", &thresholds_json(inst, &rules.lattice, &fp.thresholds, &fp.warnings))?;
    for w in &fp.warnings {
        eprintln!("warning: {w}");
    }
    println!("solved in {} fixed-point rounds (converged: {})", fp.iterations, fp.converged);
    Ok(())
}

fn synthesize_cmd(inst: &MarketInstance, a: &DesignArgs, dir: &Path) -> Result<(), Failure> {
    let (syn, notes) = synthesized(inst, &a.sigma, &a.kappa)?;
    write_json(dir, "rules.json", &syn.rules)?;
    let design: Vec<Vec<Threshold>> = syn.design.iter().map(|d| d.kl.iter().map(|r| r[0]).collect()).collect();
    write_json(dir, "design.json", &design)?;
    let mut warnings = notes;
    warnings.extend(syn.warnings.iter().cloned());
    write_json(dir, "thresholds.json", &thresholds_json(inst, &syn.rules.lattice, &syn.thresholds, &warnings))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("rho: {:?}", syn.rules.rho);
    Ok(())
}

fn certify(inst: &MarketInstance, a: &DesignArgs, dir: &Path) -> Result<(), Failure> {
    let (syn, _) = synthesized(inst, &a.sigma, &a.kappa)?;
    let cert = delta_dic_certificate(inst, &syn)?;
    let suf = check_sufficient(inst, &syn)?;
    let nec = check_necessary(inst, &syn)?;
    write_json(dir, "certificate.json", &cert)?;
    write_json(dir, "margins.json", &serde_json::json!({ "sufficient": suf, "necessary": nec }))?;
    println!(
        "delta_S = {:.3e}, delta_notS = {:.3e}, sufficient conditions {}",
        cert.delta_s,
        cert.delta_not_s,
        if suf.passes { "hold" } else { "fail" }
    );
    if let Verdict::ViolatedConditions { reason } = &cert.verdict {
        return Err(semantic(reason.clone()));
    }
    Ok(())
}

fn verify(inst: &MarketInstance, a: &VerifyArgs, dir: &Path) -> Result<(), Failure> {
    let mech = mechanism(inst, a.rules.as_deref(), a.sigma.as_deref(), &a.kappa)?;
    let rep = max_deviation_gain(inst, &mech.rules, &mech.beliefs, &mech.solution, a.multi_period)?;
    write_json(dir, "deviation.json", &rep)?;
    println!("max one-shot gain {:.3e} at {:?}", rep.max_gain, rep.argmax);
    if let Some(m) = &rep.multi_period {
        println!("max multi-period gain {:.3e}", m.max_gain);
    }
    let worst = rep.multi_period.as_ref().map_or(rep.max_gain, |m| m.max_gain.max(rep.max_gain));
    if let Some(limit) = a.fail_on_gain {
        if worst > limit {
            return Err(semantic(format!("deviation gain {worst:.3e} exceeds {limit:.3e}")));
        }
    }
    Ok(())
}

fn optimize_cmd(inst: &MarketInstance, a: &OptimizeArgs, dir: &Path) -> Result<(), Failure> {
    let mut config = inst.optimizer.clone().unwrap_or_default();
    if let Some(f) = &a.family {
        config.family = f.clone();
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.starts {
        config.starts = s;
    }
    if let Some(s) = a.sweeps {
        config.sweeps = s;
    }
    let family: SigmaFamily = config.family.parse()?;
    let par = SigmaParametrization::new(inst, family, config.allowed_eps.as_deref())?;
    let res = optimize(inst, &par, &config, None)?;
    write_json(dir, "optimization.json", &res)?;
    write_text(dir, "optimization_log.csv", &res.log_csv())?;
    println!(
        "relaxed cost {:.6}, direct cost {:.6}, {} evaluations",
        res.relaxed_cost,
        res.direct_cost.value,
        res.evaluations.len()
    );
    Ok(())
}

fn simulate(inst: &MarketInstance, a: &SimulateArgs, dir: &Path) -> Result<(), Failure> {
    let mech = mechanism(inst, a.rules.as_deref(), a.sigma.as_deref(), &a.kappa)?;
    let summary = monte_carlo(inst, &mech.rules, &mech.thresholds, a.trials, a.seed, a.keep_traces)?;
    if a.keep_traces > 0 {
        write_text(dir, "traces.csv", &traces_csv(&summary.traces))?;
    }
    let exact = direct_cost(inst, &mech.rules, &mech.thresholds).ok();
    write_json(
        dir,
        "summary.json",
        &serde_json::json!({
            "trials": summary.trials,
            "seed": summary.seed,
            "owner_mean_payoff": summary.owner_mean_payoff,
            "owner_std_error": summary.owner_std_error,
            "buyer_mean_cost": summary.buyer_mean_cost,
            "buyer_std_error": summary.buyer_std_error,
            "stopping_histogram": summary.stopping_histogram,
            "mean_cumulative_eps": summary.mean_cumulative_eps,
            "exact_buyer_cost": exact.map(|c| c.value),
            "warnings": mech.warnings,
        }),
    )?;
    println!("buyer mean cost {:.6} over {} trials", summary.buyer_mean_cost, summary.trials);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
