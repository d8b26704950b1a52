//! Seeded price-path simulation on a uniform grid.
//!
//! Every model in a [`ThetaGrid`] is driven by the same [`NoisePanel`], so
//! cross-model comparisons are pathwise (common random numbers).

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{EngineError, Result, Scalar};

/// Largest lattice the engine will enumerate leaf by leaf.
pub const MAX_LATTICE_LEAVES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<F> {
    horizon: F,
    steps: usize,
}

impl<F: Scalar> TimeGrid<F> {
    pub fn new(horizon: F, steps: usize) -> Result<Self> {
        if !(horizon > F::zero()) || !horizon.is_finite() {
            return Err(EngineError::Configuration(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(EngineError::Configuration("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> F {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> F {
        self.horizon / F::from_usize_lossy(self.steps)
    }

    /// Grid instant `i`; the endpoints are exact.
    pub fn time(&self, i: usize) -> F {
        if i >= self.steps {
            return self.horizon;
        }
        self.horizon * F::from_usize_lossy(i) / F::from_usize_lossy(self.steps)
    }

    pub fn times(&self) -> Vec<F> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Independent Gaussian paths, each with probability `1/M`.
    MonteCarlo,
    /// Full enumeration of a `branching`-ary tree of `±h` moves per driver;
    /// every leaf has probability `branching^-N`.
    Lattice { branching: usize },
}

/// Brownian increments shared by every model of a run.
///
/// Increments are stored path-major: `increments[(path * steps + step) * drivers + driver]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePanel<F> {
    seed: u64,
    paths: usize,
    steps: usize,
    drivers: usize,
    kind: NoiseKind,
    increments: Vec<F>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller (cosine branch) on two 53-bit uniforms; u1 is kept in (0, 1].
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl<F: Scalar> NoisePanel<F> {
    /// Gaussian panel with variance `dt` per increment.
    ///
    /// Path `m` reads ChaCha8 stream `m` of `seed` sequentially, so the draw
    /// for `(path, step, driver)` sits at a fixed word offset and existing
    /// paths never change when more paths are requested.
    pub fn monte_carlo(seed: u64, paths: usize, grid: &TimeGrid<F>, drivers: usize) -> Result<Self> {
        if paths == 0 {
            return Err(EngineError::Configuration("noise panel needs at least one path".into()));
        }
        if !(1..=2).contains(&drivers) {
            return Err(EngineError::Configuration(format!(
                "drivers must be 1 or 2, got {drivers}"
            )));
        }
        let steps = grid.steps();
        let per_path = steps * drivers;
        let scale = grid.dt().as_f64().sqrt();
        let rows: Vec<Vec<F>> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64);
                (0..per_path)
                    .map(|_| F::lit(standard_normal(&mut rng) * scale))
                    .collect()
            })
            .collect();
        Ok(Self {
            seed,
            paths,
            steps,
            drivers,
            kind: NoiseKind::MonteCarlo,
            increments: rows.into_iter().flatten().collect(),
        })
    }

    /// Equiprobable lattice with moves `±step_size` (default `sqrt(dt)`).
    ///
    /// Leaves are numbered so that the move at step 0 is the most significant
    /// base-`2^drivers` digit; leaves sharing a history up to step `i` form a
    /// contiguous block.
    pub fn lattice(grid: &TimeGrid<F>, drivers: usize, step_size: Option<F>) -> Result<Self> {
        if !(1..=2).contains(&drivers) {
            return Err(EngineError::Configuration(format!(
                "drivers must be 1 or 2, got {drivers}"
            )));
        }
        let steps = grid.steps();
        let branching = 1usize << drivers;
        let paths = (0..steps)
            .try_fold(1usize, |acc, _| acc.checked_mul(branching))
            .filter(|&p| p <= MAX_LATTICE_LEAVES)
            .ok_or_else(|| {
                EngineError::Configuration(format!(
                    "lattice with {steps} steps and {drivers} drivers exceeds {MAX_LATTICE_LEAVES} leaves"
                ))
            })?;
        let h = step_size.unwrap_or_else(|| grid.dt().sqrt());
        if !(h > F::zero()) {
            return Err(EngineError::Configuration("lattice step must be positive".into()));
        }
        let mut increments = Vec::with_capacity(paths * steps * drivers);
        for m in 0..paths {
            for i in 0..steps {
                let digit = (m / branching.pow((steps - 1 - i) as u32)) % branching;
                for j in 0..drivers {
                    increments.push(if (digit >> j) & 1 == 1 { h } else { -h });
                }
            }
        }
        Ok(Self {
            seed: 0,
            paths,
            steps,
            drivers,
            kind: NoiseKind::Lattice { branching },
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn drivers(&self) -> usize {
        self.drivers
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.kind, NoiseKind::Lattice { .. })
    }

    pub fn increment(&self, path: usize, step: usize, driver: usize) -> F {
        self.increments[(path * self.steps + step) * self.drivers + driver]
    }

    /// Increments of one path, `steps * drivers` values.
    pub fn path_increments(&self, path: usize) -> &[F] {
        let w = self.steps * self.drivers;
        &self.increments[path * w..(path + 1) * w]
    }

    /// Increments of one driver along one path.
    pub fn driver_increments(&self, path: usize, driver: usize) -> Vec<F> {
        (0..self.steps).map(|i| self.increment(path, i, driver)).collect()
    }

    /// Cumulated noise `W` at grid index `step`.
    pub fn brownian(&self, path: usize, step: usize, driver: usize) -> F {
        (0..step).map(|i| self.increment(path, i, driver)).sum()
    }

    fn branching(&self) -> Result<usize> {
        match self.kind {
            NoiseKind::Lattice { branching } => Ok(branching),
            NoiseKind::MonteCarlo => Err(EngineError::Configuration(
                "operation requires lattice noise".into(),
            )),
        }
    }

    /// Number of distinct histories at grid index `step`.
    pub fn nodes_at(&self, step: usize) -> Result<usize> {
        Ok(self.branching()?.pow(step as u32))
    }

    pub fn node_of(&self, path: usize, step: usize) -> Result<usize> {
        let b = self.branching()?;
        Ok(path / b.pow((self.steps - step) as u32))
    }

    /// Leaves that pass through `node` at grid index `step`.
    pub fn node_block(&self, step: usize, node: usize) -> Result<Range<usize>> {
        let width = self.branching()?.pow((self.steps - step) as u32);
        Ok(node * width..(node + 1) * width)
    }

    /// Copy of the panel restricted to its first `paths` paths.
    pub fn truncated(&self, paths: usize) -> Result<Self> {
        if self.is_lattice() || paths == 0 || paths > self.paths {
            return Err(EngineError::Configuration("invalid truncation".into()));
        }
        let w = self.steps * self.drivers;
        Ok(Self {
            paths,
            increments: self.increments[..paths * w].to_vec(),
            ..self.clone()
        })
    }
}

/// `intercept + slope * y`; used for the factor model's `m` and `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap<F> {
    pub intercept: F,
    pub slope: F,
}

impl<F: Scalar> AffineMap<F> {
    pub fn eval(&self, y: F) -> F {
        self.intercept + self.slope * y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBox<F> {
    pub mu_lo: F,
    pub mu_hi: F,
    pub sigma_lo: F,
    pub sigma_hi: F,
}

impl<F: Scalar> CoefficientBox<F> {
    pub fn clamp(&self, mu: F, sigma: F) -> (F, F) {
        (
            mu.max(self.mu_lo).min(self.mu_hi),
            sigma.max(self.sigma_lo).min(self.sigma_hi),
        )
    }
}

/// Per-step drift and volatility of a path-dependent Black-Scholes model.
///
/// A rule sees the step's start time and the driver-0 increments strictly
/// before the step, so it cannot look ahead.
#[derive(Clone)]
pub enum CoefficientRule<F> {
    Constant { mu: F, sigma: F },
    /// `mu = mu0 + mu1 * W_t`, `sigma = sigma0 + sigma1 * |W_t|`.
    LevelFeedback { mu0: F, mu1: F, sigma0: F, sigma1: F },
    Custom(Arc<dyn Fn(F, &[F]) -> (F, F) + Send + Sync>),
}

impl<F: Scalar> CoefficientRule<F> {
    pub fn eval(&self, t: F, past: &[F]) -> (F, F) {
        match self {
            CoefficientRule::Constant { mu, sigma } => (*mu, *sigma),
            CoefficientRule::LevelFeedback { mu0, mu1, sigma0, sigma1 } => {
                let w: F = past.iter().copied().sum();
                (*mu0 + *mu1 * w, *sigma0 + *sigma1 * w.abs())
            }
            CoefficientRule::Custom(f) => f(t, past),
        }
    }
}

impl<F: fmt::Debug> fmt::Debug for CoefficientRule<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientRule::Constant { mu, sigma } => f
                .debug_struct("Constant")
                .field("mu", mu)
                .field("sigma", sigma)
                .finish(),
            CoefficientRule::LevelFeedback { mu0, mu1, sigma0, sigma1 } => f
                .debug_struct("LevelFeedback")
                .field("mu0", mu0)
                .field("mu1", mu1)
                .field("sigma0", sigma0)
                .field("sigma1", sigma1)
                .finish(),
            CoefficientRule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Price under a factor: `dS = S((m(Y) + sigma(th11 Y + th21)) dt + sigma dW1)`
/// and `dY = (g(Y) + <rho, th1. Y + th2.>) dt + rho1 dW1 + rho2 dW2`.
///
/// `theta[r][c]` is the entry in row `r + 1`, column `c + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<F> {
    pub theta: [[F; 2]; 2],
    pub m: AffineMap<F>,
    pub g: AffineMap<F>,
    pub sigma: F,
    pub rho: [F; 2],
    pub s0: F,
    pub y0: F,
}

#[derive(Debug, Clone)]
pub enum ModelSpec<F> {
    BlackScholes { mu: F, sigma: F, s0: F },
    PathDependentBs {
        bounds: CoefficientBox<F>,
        rule: CoefficientRule<F>,
        s0: F,
    },
    Factor(FactorModel<F>),
    /// `S_t = 1 + t + arctan(W_t) / (2 pi)`.
    ArctanDrift,
}

impl<F: Scalar> ModelSpec<F> {
    pub fn black_scholes(mu: F, sigma: F, s0: F) -> Self {
        ModelSpec::BlackScholes { mu, sigma, s0 }
    }

    pub fn drivers(&self) -> usize {
        match self {
            ModelSpec::Factor(_) => 2,
            _ => 1,
        }
    }

    pub fn initial_price(&self) -> F {
        match self {
            ModelSpec::BlackScholes { s0, .. } | ModelSpec::PathDependentBs { s0, .. } => *s0,
            ModelSpec::Factor(f) => f.s0,
            ModelSpec::ArctanDrift => F::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s0 = self.initial_price();
        if !(s0 > F::zero()) || !s0.is_finite() {
            return Err(EngineError::InvalidModel(format!("s0 must be positive, got {s0}")));
        }
        match self {
            ModelSpec::BlackScholes { mu, sigma, .. } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma < F::zero() {
                    return Err(EngineError::InvalidModel(format!(
                        "need finite mu and sigma >= 0, got mu={mu} sigma={sigma}"
                    )));
                }
            }
            ModelSpec::PathDependentBs { bounds, .. } => {
                if !(bounds.sigma_lo > F::zero())
                    || bounds.sigma_lo > bounds.sigma_hi
                    || bounds.mu_lo > bounds.mu_hi
                {
                    return Err(EngineError::InvalidModel(format!(
                        "coefficient box must satisfy mu_lo <= mu_hi and 0 < sigma_lo <= sigma_hi, got {bounds:?}"
                    )));
                }
            }
            ModelSpec::Factor(f) => {
                if !(f.sigma > F::zero()) {
                    return Err(EngineError::InvalidModel("factor model needs sigma > 0".into()));
                }
            }
            ModelSpec::ArctanDrift => {}
        }
        Ok(())
    }
}

/// Non-empty, ordered family of models.
#[derive(Debug, Clone)]
pub struct ThetaGrid<F> {
    models: Vec<ModelSpec<F>>,
}

impl<F: Scalar> ThetaGrid<F> {
    pub fn new(models: Vec<ModelSpec<F>>) -> Result<Self> {
        if models.is_empty() {
            return Err(EngineError::Configuration("model family is empty".into()));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[ModelSpec<F>] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_drivers(&self) -> usize {
        self.models.iter().map(ModelSpec::drivers).max().unwrap_or(1)
    }
}

/// Simulated prices (and factor paths where applicable) for every model.
#[derive(Debug, Clone)]
pub struct ScenarioPanel<F> {
    pub grid: TimeGrid<F>,
    /// One `paths x (steps + 1)` matrix per model.
    pub prices: Vec<Array2<F>>,
    pub factors: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> ScenarioPanel<F> {
    pub fn theta_count(&self) -> usize {
        self.prices.len()
    }

    pub fn paths(&self) -> usize {
        self.prices[0].nrows()
    }
}

pub fn simulate<F: Scalar>(model: &ModelSpec<F>, grid: &TimeGrid<F>, noise: &NoisePanel<F>) -> Result<Array2<F>> {
    simulate_with_factor(model, grid, noise).map(|(s, _)| s)
}

/// Prices plus the factor path for [`ModelSpec::Factor`].
pub fn simulate_with_factor<F: Scalar>(
    model: &ModelSpec<F>,
    grid: &TimeGrid<F>,
    noise: &NoisePanel<F>,
) -> Result<(Array2<F>, Option<Array2<F>>)> {
    model.validate()?;
    if noise.steps() != grid.steps() {
        return Err(EngineError::Configuration(format!(
            "noise has {} steps, grid has {}",
            noise.steps(),
            grid.steps()
        )));
    }
    if noise.drivers() < model.drivers() {
        return Err(EngineError::Configuration(format!(
            "model needs {} drivers, noise has {}",
            model.drivers(),
            noise.drivers()
        )));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let half = F::lit(0.5);
    let rows: Vec<(Vec<F>, Option<Vec<F>>)> = (0..noise.paths())
        .into_par_iter()
        .map(|m| {
            let mut s = Vec::with_capacity(n + 1);
            match model {
                ModelSpec::BlackScholes { mu, sigma, s0 } => {
                    let drift = (*mu - half * *sigma * *sigma) * dt;
                    let mut x = F::zero();
                    s.push(*s0);
                    for i in 0..n {
                        x = x + drift + *sigma * noise.increment(m, i, 0);
                        s.push(*s0 * x.exp());
                    }
                    (s, None)
                }
                ModelSpec::PathDependentBs { bounds, rule, s0 } => {
                    let incs = noise.driver_increments(m, 0);
                    let mut x = F::zero();
                    s.push(*s0);
                    for i in 0..n {
                        let (raw_mu, raw_sigma) = rule.eval(grid.time(i), &incs[..i]);
                        let (mu, sigma) = bounds.clamp(raw_mu, raw_sigma);
                        x = x + (mu - half * sigma * sigma) * dt + sigma * incs[i];
                        s.push(*s0 * x.exp());
                    }
                    (s, None)
                }
                ModelSpec::Factor(f) => {
                    let [[t11, t12], [t21, t22]] = f.theta;
                    let mut y = f.y0;
                    let mut ys = Vec::with_capacity(n + 1);
                    let mut x = F::zero();
                    s.push(f.s0);
                    ys.push(y);
                    for i in 0..n {
                        let dw1 = noise.increment(m, i, 0);
                        let dw2 = noise.increment(m, i, 1);
                        let drift_s = f.m.eval(y) + f.sigma * (t11 * y + t21);
                        x = x + (drift_s - half * f.sigma * f.sigma) * dt + f.sigma * dw1;
                        let drift_y =
                            f.g.eval(y) + f.rho[0] * (t11 * y + t21) + f.rho[1] * (t12 * y + t22);
                        y = y + drift_y * dt + f.rho[0] * dw1 + f.rho[1] * dw2;
                        s.push(f.s0 * x.exp());
                        ys.push(y);
                    }
                    (s, Some(ys))
                }
                ModelSpec::ArctanDrift => {
                    let two_pi = F::TAU();
                    let mut w = F::zero();
                    s.push(F::one());
                    for i in 0..n {
                        w = w + noise.increment(m, i, 0);
                        s.push(F::one() + grid.time(i + 1) + w.atan() / two_pi);
                    }
                    (s, None)
                }
            }
        })
        .collect();

    let paths = noise.paths();
    let mut prices = Vec::with_capacity(paths * (n + 1));
    let mut factor = matches!(model, ModelSpec::Factor(_)).then(|| Vec::with_capacity(paths * (n + 1)));
    for (s, y) in rows {
        prices.extend(s);
        if let (Some(acc), Some(y)) = (factor.as_mut(), y) {
            acc.extend(y);
        }
    }
    if let Some(bad) = prices.iter().find(|p| !(**p > F::zero()) || !p.is_finite()) {
        return Err(EngineError::InvalidModel(format!(
            "simulation produced a non-positive or non-finite price {bad}"
        )));
    }
    let shape = (paths, n + 1);
    let prices = Array2::from_shape_vec(shape, prices).expect("shape matches");
    let factor = factor.map(|y| Array2::from_shape_vec(shape, y).expect("shape matches"));
    Ok((prices, factor))
}

pub fn simulate_panel<F: Scalar>(
    thetas: &ThetaGrid<F>,
    grid: &TimeGrid<F>,
    noise: &NoisePanel<F>,
) -> Result<ScenarioPanel<F>> {
    let mut prices = Vec::with_capacity(thetas.len());
    let mut factors = Vec::with_capacity(thetas.len());
    for (k, model) in thetas.models().iter().enumerate() {
        let (s, y) = simulate_with_factor(model, grid, noise).map_err(|e| e.at_theta(k))?;
        prices.push(s);
        factors.push(y);
    }
    Ok(ScenarioPanel {
        grid: *grid,
        prices,
        factors,
    })
}
