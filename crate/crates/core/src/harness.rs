//! Run configuration, CLI commands and reproducible output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{run_ledger, shadow_ledger, CostSpec};
use crate::cps::{
    entropy_membership, girsanov_cps, no_cps_certificate, verify_band, verify_martingale, BandReport, CheckMode,
    EntropyEstimate, NoCpsCertificate, PriceSystem, ProcessCheck,
};
use crate::scenario::{
    simulate_panel, AffineMap, CoefficientBox, CoefficientRule, FactorModel, ModelSpec, NoisePanel, ThetaGrid,
    TimeGrid,
};
use crate::solver::{
    decode, duality_report, solve, Admissibility, DualityOptions, DualityReport, PolicyClass, PolicyParams,
    ProblemSpec, RobustProblem, SolveOptions, SolveReport,
};
use crate::utility::{Domain, UtilitySpec};
use crate::{EngineError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;
pub const EXIT_NO_FEASIBLE: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseConfig {
    MonteCarlo {
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_drivers")]
        drivers: usize,
    },
    Lattice {
        #[serde(default)]
        step: Option<f64>,
        #[serde(default = "default_drivers")]
        drivers: usize,
    },
}

fn default_paths() -> usize {
    1000
}

fn default_drivers() -> usize {
    1
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::MonteCarlo {
            paths: default_paths(),
            drivers: 1,
        }
    }
}

fn default_s0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    BlackScholes {
        mu: f64,
        sigma: f64,
        #[serde(default = "default_s0")]
        s0: f64,
    },
    /// `mu = mu0 + mu1 W`, `sigma = sigma0 + sigma1 |W|`, clamped to the box.
    PathDependentBs {
        mu0: f64,
        #[serde(default)]
        mu1: f64,
        sigma0: f64,
        #[serde(default)]
        sigma1: f64,
        mu_lo: f64,
        mu_hi: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        #[serde(default = "default_s0")]
        s0: f64,
    },
    Factor {
        theta: [[f64; 2]; 2],
        m: [f64; 2],
        g: [f64; 2],
        sigma: f64,
        rho: [f64; 2],
        #[serde(default = "default_s0")]
        s0: f64,
        #[serde(default)]
        y0: f64,
    },
    Arctan,
}

impl ModelConfig {
    pub fn build(&self) -> ModelSpec<f64> {
        match *self {
            ModelConfig::BlackScholes { mu, sigma, s0 } => ModelSpec::black_scholes(mu, sigma, s0),
            ModelConfig::PathDependentBs {
                mu0,
                mu1,
                sigma0,
                sigma1,
                mu_lo,
                mu_hi,
                sigma_lo,
                sigma_hi,
                s0,
            } => ModelSpec::PathDependentBs {
                bounds: CoefficientBox {
                    mu_lo,
                    mu_hi,
                    sigma_lo,
                    sigma_hi,
                },
                rule: CoefficientRule::LevelFeedback { mu0, mu1, sigma0, sigma1 },
                s0,
            },
            ModelConfig::Factor {
                theta,
                m,
                g,
                sigma,
                rho,
                s0,
                y0,
            } => ModelSpec::Factor(FactorModel {
                theta,
                m: AffineMap {
                    intercept: m[0],
                    slope: m[1],
                },
                g: AffineMap {
                    intercept: g[0],
                    slope: g[1],
                },
                sigma,
                rho,
                s0,
                y0,
            }),
            ModelConfig::Arctan => ModelSpec::ArctanDrift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UtilityConfig {
    Log,
    Power { p: f64 },
    Exponential { a: f64 },
    Linear,
    Capped { cap: f64 },
    Table { knots: Vec<(f64, f64)>, domain: DomainConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainConfig {
    PositiveAxis,
    WholeLine,
}

impl UtilityConfig {
    pub fn build(&self) -> UtilitySpec<f64> {
        match self {
            UtilityConfig::Log => UtilitySpec::Log,
            UtilityConfig::Power { p } => UtilitySpec::Power { p: *p },
            UtilityConfig::Exponential { a } => UtilitySpec::Exponential { a: *a },
            UtilityConfig::Linear => UtilitySpec::Linear,
            UtilityConfig::Capped { cap } => UtilitySpec::Capped { cap: *cap },
            UtilityConfig::Table { knots, domain } => UtilitySpec::PiecewiseLinear {
                knots: knots.clone(),
                domain: match domain {
                    DomainConfig::PositiveAxis => Domain::PositiveAxis,
                    DomainConfig::WholeLine => Domain::WholeLine,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissibilityConfig {
    #[default]
    Rplus,
    Supermartingale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub iters: usize,
    pub step0: f64,
    pub backtrack: usize,
    /// Starting initial position; all other parameters start at zero.
    pub init_h0: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            step0: 0.1,
            backtrack: 40,
            init_h0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpsConfig {
    /// Shadow price `c * S` with `c` in `(1 - lambda, 1]`.
    pub shrink: Option<f64>,
    /// Constant shadow price under `Q = P`, instead of the Girsanov construction.
    pub constant_shadow: Option<f64>,
    pub tol: f64,
}

impl Default for CpsConfig {
    fn default() -> Self {
        Self {
            shrink: None,
            constant_shadow: None,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualityConfig {
    pub y_grid: Vec<f64>,
    pub k_grid: Vec<f64>,
    pub tol: f64,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            y_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            k_grid: vec![1.0, 4.0, 16.0],
            tol: 1e-9,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_x0() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub thetas: Vec<ModelConfig>,
    pub lambda: f64,
    #[serde(default = "default_x0")]
    pub x0: f64,
    pub utility: UtilityConfig,
    #[serde(default = "default_policy")]
    pub policy_class: PolicyClass,
    #[serde(default)]
    pub long_only: bool,
    #[serde(default)]
    pub admissibility: AdmissibilityConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub cps: CpsConfig,
    #[serde(default)]
    pub duality: DualityConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub write_ledgers: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_policy() -> PolicyClass {
    PolicyClass::DeterministicSchedule
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EngineError::Configuration(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EngineError::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>> {
        TimeGrid::new(self.grid.horizon, self.grid.steps)
    }

    pub fn noise_panel(&self, grid: &TimeGrid<f64>) -> Result<NoisePanel<f64>> {
        match self.noise {
            NoiseConfig::MonteCarlo { paths, drivers } => NoisePanel::monte_carlo(self.seed, paths, grid, drivers),
            NoiseConfig::Lattice { step, drivers } => NoisePanel::lattice(grid, drivers, step),
        }
    }

    pub fn theta_grid(&self) -> Result<ThetaGrid<f64>> {
        let models: Vec<_> = self.thetas.iter().map(ModelConfig::build).collect();
        for (k, m) in models.iter().enumerate() {
            m.validate().map_err(|e| e.at_theta(k))?;
        }
        ThetaGrid::new(models)
    }

    pub fn cost(&self) -> Result<CostSpec<f64>> {
        CostSpec::new(self.lambda, self.x0)
    }

    pub fn solve_options(&self, slots: usize) -> SolveOptions<f64> {
        SolveOptions {
            iters: self.optimizer.iters,
            step0: self.optimizer.step0,
            backtrack: self.optimizer.backtrack,
            init: self.optimizer.init_h0.map(|h0| PolicyParams {
                h0,
                ..PolicyParams::zero(slots)
            }),
        }
    }
}

/// Registered price system per model, per the config's CPS settings.
pub fn price_systems(
    cfg: &RunConfig,
    thetas: &ThetaGrid<f64>,
    grid: &TimeGrid<f64>,
    noise: &NoisePanel<f64>,
) -> Result<Vec<PriceSystem<f64>>> {
    thetas
        .models()
        .iter()
        .enumerate()
        .map(|(k, model)| {
            match cfg.cps.constant_shadow {
                Some(c) => PriceSystem::constant(noise.paths(), grid.steps(), c, cfg.lambda),
                None => girsanov_cps(model, grid, noise, cfg.cps.shrink),
            }
            .map_err(|e| e.at_theta(k))
        })
        .collect()
}

pub fn build_problem(cfg: &RunConfig) -> Result<(RobustProblem<f64>, Option<Vec<PriceSystem<f64>>>)> {
    let grid = cfg.time_grid()?;
    let noise = cfg.noise_panel(&grid)?;
    let thetas = cfg.theta_grid()?;
    let (admissibility, systems) = match cfg.admissibility {
        AdmissibilityConfig::Rplus => (Admissibility::RPlus, None),
        AdmissibilityConfig::Supermartingale => {
            let systems = price_systems(cfg, &thetas, &grid, &noise)?;
            (
                Admissibility::Supermartingale {
                    systems: systems.clone(),
                    tol: cfg.cps.tol,
                },
                Some(systems),
            )
        }
    };
    let problem = RobustProblem::new(ProblemSpec {
        cost: cfg.cost()?,
        thetas,
        utility: cfg.utility.build(),
        grid,
        noise,
        policy_class: cfg.policy_class,
        long_only: cfg.long_only,
        admissibility,
    })?;
    Ok((problem, systems))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    VerifyCps,
    Solve,
    Duality,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::VerifyCps => "verify-cps",
            Command::Solve => "solve",
            Command::Duality => "duality",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub engine_version: &'static str,
    pub command: &'static str,
    pub config: &'a RunConfig,
    pub wall_time_seconds: f64,
    pub exit_code: i32,
    pub reports: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub message: String,
    pub outputs: Vec<PathBuf>,
}

/// Exit code for an error raised while running a command.
pub fn exit_code_for(err: &EngineError) -> i32 {
    match err.root() {
        EngineError::Configuration(_) | EngineError::InvalidModel(_) | EngineError::Json(_) => EXIT_CONFIG,
        EngineError::NoFeasiblePoint => EXIT_NO_FEASIBLE,
        _ => EXIT_OTHER,
    }
}

struct Writer {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
    paths: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
            paths: Vec::new(),
        })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, data)?;
        self.entries.push(OutputEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(data)),
            bytes: data.len() as u64,
        });
        self.paths.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, &data)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let data = w.into_inner().map_err(|e| EngineError::Io(e.into_error()))?;
        self.bytes(name, &data)
    }

    fn finish(mut self, cfg: &RunConfig, cmd: Command, started: Instant, exit_code: i32, reports: serde_json::Value) -> Result<Vec<PathBuf>> {
        let manifest = RunManifest {
            engine_version: env!("CARGO_PKG_VERSION"),
            command: cmd.name(),
            config: cfg,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            exit_code,
            reports,
            outputs: self.entries.clone(),
        };
        let mut data = serde_json::to_vec_pretty(&manifest)?;
        data.push(b'\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, data)?;
        self.paths.push(path);
        Ok(self.paths)
    }
}

fn fmt(x: f64) -> String {
    x.to_string()
}

/// Runs `cmd`, writing its outputs and `manifest.json` into `out`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    match cmd {
        Command::Simulate => cmd_simulate(cfg, out, started),
        Command::VerifyCps => cmd_verify_cps(cfg, out, started),
        Command::Solve => cmd_solve(cfg, out, started),
        Command::Duality => cmd_duality(cfg, out, started),
        Command::Selftest => cmd_selftest(cfg, out, started),
    }
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, started: Instant) -> Result<RunOutcome> {
    let grid = cfg.time_grid()?;
    let noise = cfg.noise_panel(&grid)?;
    let thetas = cfg.theta_grid()?;
    let panel = simulate_panel(&thetas, &grid, &noise)?;
    let mut w = Writer::new(out)?;
    let mut rows = Vec::new();
    for (k, prices) in panel.prices.iter().enumerate() {
        for ((m, i), &s) in prices.indexed_iter() {
            rows.push(vec![k.to_string(), m.to_string(), i.to_string(), fmt(s)]);
        }
    }
    w.csv("prices.csv", &["theta_index", "path", "time_index", "price"], rows)?;
    if panel.factors.iter().any(Option::is_some) {
        let mut rows = Vec::new();
        for (k, f) in panel.factors.iter().enumerate() {
            if let Some(f) = f {
                for ((m, i), &y) in f.indexed_iter() {
                    rows.push(vec![k.to_string(), m.to_string(), i.to_string(), fmt(y)]);
                }
            }
        }
        w.csv("factors.csv", &["theta_index", "path", "time_index", "factor"], rows)?;
    }
    let n_rows = panel.prices.iter().map(|p| p.len()).sum::<usize>();
    let outputs = w.finish(cfg, Command::Simulate, started, EXIT_OK, serde_json::json!({ "price_rows": n_rows }))?;
    Ok(RunOutcome {
        exit_code: EXIT_OK,
        message: format!("wrote {n_rows} price rows"),
        outputs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThetaCpsReport {
    pub theta: usize,
    pub certificate: Option<NoCpsCertificate<f64>>,
    pub construction_error: Option<String>,
    pub band: Option<BandReport<f64>>,
    pub martingale: Option<ProcessCheck<f64>>,
    pub entropy: Option<EntropyEstimate<f64>>,
    pub pass: bool,
}

pub fn cmd_verify_cps(cfg: &RunConfig, out: &Path, started: Instant) -> Result<RunOutcome> {
    let grid = cfg.time_grid()?;
    let noise = cfg.noise_panel(&grid)?;
    let thetas = cfg.theta_grid()?;
    let panel = simulate_panel(&thetas, &grid, &noise)?;
    let utility = cfg.utility.build();
    let mode = if noise.is_lattice() {
        CheckMode::Lattice(&noise)
    } else {
        CheckMode::MonteCarlo
    };
    let mut reports = Vec::new();
    let mut lines = Vec::new();
    for (k, model) in thetas.models().iter().enumerate() {
        let certificate = no_cps_certificate(model, grid.horizon(), cfg.lambda);
        if let Some(c) = certificate.filter(|c| c.holds) {
            lines.push(format!(
                "model {k}: no consistent price system exists: (1 - lambda) inf S_T = {} > {} = S_0",
                c.bid_floor, c.ask_ceiling
            ));
            reports.push(ThetaCpsReport {
                theta: k,
                certificate,
                construction_error: None,
                band: None,
                martingale: None,
                entropy: None,
                pass: false,
            });
            continue;
        }
        let built = match cfg.cps.constant_shadow {
            Some(c) => PriceSystem::constant(noise.paths(), grid.steps(), c, cfg.lambda),
            None => girsanov_cps(model, &grid, &noise, cfg.cps.shrink),
        };
        let ps = match built {
            Ok(ps) => ps,
            Err(e) if matches!(e, EngineError::NoCpsConstructible(_)) => {
                lines.push(format!("model {k}: {e}"));
                reports.push(ThetaCpsReport {
                    theta: k,
                    certificate,
                    construction_error: Some(e.to_string()),
                    band: None,
                    martingale: None,
                    entropy: None,
                    pass: false,
                });
                continue;
            }
            Err(e) => return Err(e.at_theta(k)),
        };
        let band = verify_band(&panel.prices[k], &ps, cfg.lambda)?;
        let martingale = verify_martingale(&ps, mode, cfg.cps.tol)?;
        let entropy = entropy_membership(&ps, |y| utility.conj(y));
        let pass = band.holds && martingale.pass;
        lines.push(format!(
            "model {k}: band {} (delta {}), martingale {}",
            if band.holds { "holds" } else { "fails" },
            band.delta,
            if martingale.pass { "pass" } else { "fail" }
        ));
        reports.push(ThetaCpsReport {
            theta: k,
            certificate,
            construction_error: None,
            band: Some(band),
            martingale: Some(martingale),
            entropy: Some(entropy),
            pass,
        });
    }
    let all_pass = reports.iter().all(|r| r.pass);
    let exit_code = if all_pass { EXIT_OK } else { EXIT_VERIFICATION };
    let mut w = Writer::new(out)?;
    w.json("cps_report.json", &reports)?;
    let outputs = w.finish(
        cfg,
        Command::VerifyCps,
        started,
        exit_code,
        serde_json::json!({ "all_pass": all_pass }),
    )?;
    Ok(RunOutcome {
        exit_code,
        message: lines.join("\n"),
        outputs,
    })
}

fn histogram_rows(values: &[Vec<f64>], bins: usize) -> Vec<Vec<String>> {
    let bins = bins.max(1);
    let all = values.iter().flatten().copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut rows = Vec::new();
    for (k, vals) in values.iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for &v in vals {
            let j = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[j] += 1;
        }
        for (j, c) in counts.into_iter().enumerate() {
            let a = lo + width * j as f64;
            rows.push(vec![k.to_string(), fmt(a), fmt(a + width), c.to_string()]);
        }
    }
    rows
}

fn solve_and_write(
    cfg: &RunConfig,
    problem: &RobustProblem<f64>,
    w: &mut Writer,
) -> Result<SolveReport<f64>> {
    let report = solve(problem, &cfg.solve_options(problem.slots()))?;
    w.json("solve_report.json", &report)?;
    w.csv(
        "history.csv",
        &["iter", "robust_value", "argmin_theta", "step_size"],
        report.history.iter().map(|h| {
            vec![
                h.iter.to_string(),
                fmt(h.robust_value),
                h.argmin_theta.to_string(),
                fmt(h.step_size),
            ]
        }),
    )?;
    let strategy = decode(problem, &report.best_params)?;
    let mut rows = Vec::new();
    for m in 0..strategy.paths() {
        let (up, dn) = (strategy.up_row(m), strategy.dn_row(m));
        for i in 0..up.len() {
            rows.push(vec![m.to_string(), i.to_string(), fmt(up[i]), fmt(dn[i])]);
        }
    }
    w.csv("strategy.csv", &["path", "time_index", "d_up", "d_dn"], rows)?;

    let u = &problem.spec().utility;
    let mut utilities = Vec::new();
    let mut ledgers = Vec::new();
    for k in 0..problem.spec().thetas.len() {
        let ledger = run_ledger(&strategy, &problem.panel().prices[k], &problem.spec().cost)?;
        utilities.push(ledger.terminal_liq().into_iter().map(|x| u.eval(x)).collect::<Vec<_>>());
        ledgers.push(ledger);
    }
    w.csv(
        "utility_histogram.csv",
        &["theta_index", "bin_lo", "bin_hi", "count"],
        histogram_rows(&utilities, cfg.histogram_bins),
    )?;
    if cfg.write_ledgers {
        let systems = match &problem.spec().admissibility {
            Admissibility::Supermartingale { systems, .. } => Some(systems),
            Admissibility::RPlus => None,
        };
        for (k, ledger) in ledgers.iter().enumerate() {
            let ledger = match systems {
                Some(s) => shadow_ledger(ledger, &s[k].shadow)?,
                None => ledger.clone(),
            };
            let mut rows = Vec::new();
            for ((m, i), &c) in ledger.cash.indexed_iter() {
                rows.push(vec![
                    m.to_string(),
                    i.to_string(),
                    fmt(c),
                    fmt(ledger.position[[m, i]]),
                    fmt(ledger.liq[[m, i]]),
                    ledger.shadow.as_ref().map_or(String::new(), |v| fmt(v[[m, i]])),
                ]);
            }
            w.csv(
                &format!("ledger_theta{k}.csv"),
                &["path", "time_index", "cash", "position", "liq", "shadow"],
                rows,
            )?;
        }
    }
    Ok(report)
}

fn solve_summary(r: &SolveReport<f64>) -> serde_json::Value {
    serde_json::json!({
        "robust_value": r.robust_value,
        "argmin_theta": r.argmin_theta,
        "h0": r.best_params.h0,
        "averaged_value": r.averaged_value,
        "per_theta": r.per_theta.iter().map(|e| e.mean).collect::<Vec<_>>(),
    })
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path, started: Instant) -> Result<RunOutcome> {
    let (problem, _) = build_problem(cfg)?;
    let mut w = Writer::new(out)?;
    let report = solve_and_write(cfg, &problem, &mut w)?;
    let message = format!(
        "robust value {} (worst model {}), h0 {}",
        report.robust_value, report.argmin_theta, report.best_params.h0
    );
    let outputs = w.finish(cfg, Command::Solve, started, EXIT_OK, solve_summary(&report))?;
    Ok(RunOutcome {
        exit_code: EXIT_OK,
        message,
        outputs,
    })
}

pub fn cmd_duality(cfg: &RunConfig, out: &Path, started: Instant) -> Result<RunOutcome> {
    let (problem, systems) = build_problem(cfg)?;
    let systems = match systems {
        Some(s) => s,
        None => price_systems(cfg, &problem.spec().thetas, &problem.spec().grid, &problem.spec().noise)?,
    };
    let mut w = Writer::new(out)?;
    let report = solve_and_write(cfg, &problem, &mut w)?;
    let opts = DualityOptions {
        y_grid: cfg.duality.y_grid.clone(),
        k_grid: cfg.duality.k_grid.clone(),
        solve: cfg.solve_options(problem.slots()),
        tol: cfg.duality.tol,
    };
    let dual: DualityReport<f64> = duality_report(&problem, &report, &systems, &opts)?;
    w.json("duality_report.json", &dual)?;
    let message = format!(
        "duality diagnostics {}",
        if dual.all_pass { "pass" } else { "flag violations" }
    );
    let outputs = w.finish(
        cfg,
        Command::Duality,
        started,
        EXIT_OK,
        serde_json::json!({ "all_pass": dual.all_pass, "inada_pass": dual.inada_pass }),
    )?;
    Ok(RunOutcome {
        exit_code: EXIT_OK,
        message,
        outputs,
    })
}

/// Quick built-in checks that need no external fixtures.
pub fn selftest_checks() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let log = UtilitySpec::<f64>::Log;
    out.push((
        "log conjugate at y = 2",
        crate::utility::conjugate(&log, 2.0).is_ok_and(|v| (v - (-(2f64.ln()) - 1.0)).abs() < 1e-8),
    ));
    let arctan = (|| -> Result<bool> {
        let grid = TimeGrid::new(1.0, 20)?;
        let noise = NoisePanel::monte_carlo(1, 200, &grid, 1)?;
        let prices = crate::scenario::simulate(&ModelSpec::ArctanDrift, &grid, &noise)?;
        let ps = PriceSystem::constant(200, 20, 0.75, 2.0 / 3.0)?;
        Ok(verify_band(&prices, &ps, 2.0 / 3.0)?.holds)
    })();
    out.push(("arctan band at lambda = 2/3", arctan.unwrap_or(false)));
    out.push((
        "arctan certificate at lambda = 0.42",
        no_cps_certificate(&ModelSpec::ArctanDrift, 1.0, 0.42).is_some_and(|c| c.holds),
    ));
    let lux = crate::utility::luxemburg_norm(&[1.0; 4], |x: f64| x.exp() - 1.0);
    out.push((
        "Luxemburg norm of a constant",
        lux.is_ok_and(|v| (v - 1.0 / 2f64.ln()).abs() < 1e-9),
    ));
    out
}

pub fn cmd_selftest(cfg: &RunConfig, out: &Path, started: Instant) -> Result<RunOutcome> {
    let checks = selftest_checks();
    let pass = checks.iter().all(|c| c.1);
    let lines: Vec<String> = checks
        .iter()
        .map(|(name, ok)| format!("{} {name}", if *ok { "PASS" } else { "FAIL" }))
        .collect();
    let exit_code = if pass { EXIT_OK } else { EXIT_VERIFICATION };
    let mut w = Writer::new(out)?;
    let record: Vec<_> = checks.iter().map(|(n, ok)| serde_json::json!({ "check": n, "pass": ok })).collect();
    w.json("selftest.json", &record)?;
    let outputs = w.finish(cfg, Command::Selftest, started, exit_code, serde_json::json!({ "pass": pass }))?;
    Ok(RunOutcome {
        exit_code,
        message: lines.join("\n"),
        outputs,
    })
}
