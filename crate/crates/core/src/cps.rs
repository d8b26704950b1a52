//! Consistent price systems: construction, band and martingale checks,
//! entropy membership and the supermartingale/polarity diagnostics.

use ndarray::Array2;
use serde::Serialize;

use crate::scenario::{simulate, ModelSpec, NoisePanel, TimeGrid};
use crate::stats::{self, Estimate};
use crate::{EngineError, Result, Scalar};

/// Shadow price `S~` together with a measure `Q`, represented by `dQ/dP`
/// on each path.
#[derive(Debug, Clone)]
pub struct PriceSystem<F> {
    pub shadow: Array2<F>,
    pub weights: Vec<F>,
    /// Cost level at which the band is claimed.
    pub mu_level: F,
}

impl<F: Scalar> PriceSystem<F> {
    pub fn new(shadow: Array2<F>, weights: Vec<F>, mu_level: F) -> Result<Self> {
        if shadow.nrows() != weights.len() {
            return Err(EngineError::Contract(format!(
                "{} weights for {} shadow paths",
                weights.len(),
                shadow.nrows()
            )));
        }
        if weights.iter().any(|&w| !(w > F::zero()) || !w.is_finite()) {
            return Err(EngineError::Contract("weights must be positive and finite".into()));
        }
        let m = stats::mean(&weights);
        if (m - F::one()).abs() > F::lit(1e-12).max(F::lit(8.0) * F::epsilon()) {
            return Err(EngineError::Contract(format!("weights have mean {m}, expected 1")));
        }
        if shadow.iter().any(|&s| !(s > F::zero()) || !s.is_finite()) {
            return Err(EngineError::Contract("shadow prices must be positive".into()));
        }
        Ok(Self {
            shadow,
            weights,
            mu_level,
        })
    }

    /// `S~ = value` everywhere under `Q = P`.
    pub fn constant(paths: usize, steps: usize, value: F, mu_level: F) -> Result<Self> {
        Self::new(Array2::from_elem((paths, steps + 1), value), vec![F::one(); paths], mu_level)
    }

    pub fn paths(&self) -> usize {
        self.shadow.nrows()
    }

    pub fn steps(&self) -> usize {
        self.shadow.ncols() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandReport<F> {
    pub holds: bool,
    /// Smallest gap to the band edges, clipped at zero.
    pub delta: F,
    /// The same minimum without clipping; negative when the band fails.
    pub min_gap: F,
    pub strict: bool,
}

/// Exact check of `(1 - lambda) S <= S~ <= S` at every grid entry.
pub fn verify_band<F: Scalar>(prices: &Array2<F>, ps: &PriceSystem<F>, lambda: F) -> Result<BandReport<F>> {
    if prices.dim() != ps.shadow.dim() {
        return Err(EngineError::Contract(format!(
            "price panel {:?} and shadow panel {:?} differ",
            prices.dim(),
            ps.shadow.dim()
        )));
    }
    let bid = F::one() - lambda;
    let mut min_gap = F::infinity();
    for (&s, &st) in prices.iter().zip(ps.shadow.iter()) {
        min_gap = min_gap.min(st - bid * s).min(s - st);
    }
    let holds = min_gap >= F::zero();
    Ok(BandReport {
        holds,
        delta: min_gap.max(F::zero()),
        min_gap,
        strict: holds && min_gap > F::zero(),
    })
}

/// Analytic proof that no consistent price system exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoCpsCertificate<F> {
    pub lambda: F,
    /// Lower bound of the bid at the horizon, `(1 - lambda) inf S_T`.
    pub bid_floor: F,
    /// Upper bound of any shadow price at time 0, `S_0`.
    pub ask_ceiling: F,
    pub holds: bool,
}

/// Registered no-CPS test for `model`, if one exists.
///
/// Only the arctan example has one: `S_T > 3/4 + T` on every path, so a
/// martingale shadow price would need `S~_0 >= (1 - lambda)(3/4 + T) > 1 = S_0`.
pub fn no_cps_certificate<F: Scalar>(model: &ModelSpec<F>, horizon: F, lambda: F) -> Option<NoCpsCertificate<F>> {
    match model {
        ModelSpec::ArctanDrift => {
            let bid_floor = (F::one() - lambda) * (F::lit(0.75) + horizon);
            let ask_ceiling = F::one();
            Some(NoCpsCertificate {
                lambda,
                bid_floor,
                ask_ceiling,
                holds: bid_floor > ask_ceiling,
            })
        }
        _ => None,
    }
}

/// Unnormalized `exp(-(mu/sigma) W_T - (mu/sigma)^2 T / 2)` per path.
pub fn girsanov_density<F: Scalar>(mu: F, sigma: F, grid: &TimeGrid<F>, noise: &NoisePanel<F>) -> Result<Vec<F>> {
    if !(sigma > F::zero()) {
        return Err(EngineError::NoCpsConstructible("sigma = 0".into()));
    }
    let a = mu / sigma;
    let t = grid.horizon();
    let half = F::lit(0.5);
    Ok((0..noise.paths())
        .map(|m| (-a * noise.brownian(m, noise.steps(), 0) - half * a * a * t).exp())
        .collect())
}

/// Builds `(S~, Q)` for a model on `noise`, with `S~ = shrink * S`.
///
/// Monte Carlo panels use the Girsanov density of a Black-Scholes model,
/// rescaled to sample mean one. Lattice panels use the exact one-step
/// martingale probabilities read off the simulated tree, which works for
/// any model whose children take at most two distinct prices.
pub fn girsanov_cps<F: Scalar>(
    model: &ModelSpec<F>,
    grid: &TimeGrid<F>,
    noise: &NoisePanel<F>,
    shrink: Option<F>,
) -> Result<PriceSystem<F>> {
    let c = shrink.unwrap_or_else(F::one);
    if !(c > F::zero()) || c > F::one() {
        return Err(EngineError::Configuration(format!("shrink factor must lie in (0, 1], got {c}")));
    }
    if let ModelSpec::BlackScholes { sigma, .. } = model {
        if !(*sigma > F::zero()) {
            return Err(EngineError::NoCpsConstructible("sigma = 0".into()));
        }
    }
    let prices = simulate(model, grid, noise)?;
    let weights = if noise.is_lattice() {
        lattice_measure(&prices, noise)?
    } else {
        let ModelSpec::BlackScholes { mu, sigma, .. } = model else {
            return Err(EngineError::Configuration(
                "Monte Carlo Girsanov weights need a Black-Scholes model".into(),
            ));
        };
        let raw = girsanov_density(*mu, *sigma, grid, noise)?;
        let m = stats::mean(&raw);
        raw.into_iter().map(|w| w / m).collect()
    };
    PriceSystem::new(prices.mapv(|s| s * c), weights, F::one() - c)
}

/// Leaf weights `dQ/dP` making each simulated price a one-step martingale.
fn lattice_measure<F: Scalar>(prices: &Array2<F>, noise: &NoisePanel<F>) -> Result<Vec<F>> {
    let n = noise.steps();
    let leaves = noise.paths();
    let b = noise.nodes_at(1)?;
    let mut w = vec![F::one(); leaves];
    for i in 0..n {
        for node in 0..noise.nodes_at(i)? {
            let block = noise.node_block(i, node)?;
            let s = prices[[block.start, i]];
            let width = block.len() / b;
            let child: Vec<F> = (0..b).map(|k| prices[[block.start + k * width, i + 1]]).collect();
            let hi = child.iter().copied().fold(F::neg_infinity(), F::max);
            let lo = child.iter().copied().fold(F::infinity(), F::min);
            let probs: Vec<F> = if hi == lo {
                if hi != s {
                    return Err(EngineError::NoCpsConstructible(format!(
                        "deterministic move at step {i} node {node}"
                    )));
                }
                vec![F::one() / F::from_usize_lossy(b); b]
            } else {
                if child.iter().any(|&x| x != hi && x != lo) {
                    return Err(EngineError::NoCpsConstructible(format!(
                        "more than two distinct successors at step {i} node {node}"
                    )));
                }
                let q = (s - lo) / (hi - lo);
                if !(q > F::zero() && q < F::one()) {
                    return Err(EngineError::NoCpsConstructible(format!(
                        "price at step {i} node {node} lies outside its successors"
                    )));
                }
                let n_hi = F::from_usize_lossy(child.iter().filter(|&&x| x == hi).count());
                let n_lo = F::from_usize_lossy(b) - n_hi;
                child
                    .iter()
                    .map(|&x| if x == hi { q / n_hi } else { (F::one() - q) / n_lo })
                    .collect()
            };
            for (k, p) in probs.into_iter().enumerate() {
                let factor = p * F::from_usize_lossy(b);
                for m in block.start + k * width..block.start + (k + 1) * width {
                    w[m] = w[m] * factor;
                }
            }
        }
    }
    Ok(w)
}

/// How conditional expectations are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode<'a, F> {
    /// Exact node-conditional expectations on a full lattice.
    Lattice(&'a NoisePanel<F>),
    /// Sample means with a three-standard-error allowance.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcessCheck<F> {
    pub pass: bool,
    /// Largest excess over the allowed value (`<= 0` means slack everywhere).
    pub max_excess: F,
    /// Monte Carlo only: largest excess in standard errors.
    pub max_z: Option<F>,
    pub checks: usize,
}

fn check_lattice<F: Scalar>(
    values: &Array2<F>,
    weights: &[F],
    noise: &NoisePanel<F>,
    tol: F,
    two_sided: bool,
) -> Result<ProcessCheck<F>> {
    if noise.paths() != values.nrows() || noise.steps() + 1 != values.ncols() {
        return Err(EngineError::Contract("lattice and value panel shapes differ".into()));
    }
    let mut max_excess = F::neg_infinity();
    let mut checks = 0;
    for i in 0..noise.steps() {
        for node in 0..noise.nodes_at(i)? {
            let block = noise.node_block(i, node)?;
            let next: Vec<F> = block.clone().map(|m| values[[m, i + 1]]).collect();
            let cond = stats::conditional_mean(&next, &weights[block.clone()]);
            for m in block {
                let diff = cond - values[[m, i]];
                let excess = if two_sided { diff.abs() } else { diff };
                max_excess = max_excess.max(excess);
                checks += 1;
            }
        }
    }
    Ok(ProcessCheck {
        pass: max_excess <= tol,
        max_excess,
        max_z: None,
        checks,
    })
}

fn check_mc<F: Scalar>(values: &Array2<F>, weights: &[F], tol: F, two_sided: bool) -> ProcessCheck<F> {
    let three = F::lit(3.0);
    let mut pass = true;
    let mut max_excess = F::neg_infinity();
    let mut max_z = F::neg_infinity();
    let mut checks = 0;
    let mut test = |diffs: Vec<F>| {
        let e = stats::weighted_mean_se(&diffs, weights);
        let stat = if two_sided { e.mean.abs() } else { e.mean };
        max_excess = max_excess.max(stat);
        if e.se > F::zero() {
            max_z = max_z.max(stat / e.se);
        }
        pass &= stat <= three * e.se + tol;
        checks += 1;
    };
    let n = values.ncols() - 1;
    for i in 0..n {
        test(values.column(i + 1).iter().zip(values.column(i)).map(|(&b, &a)| b - a).collect());
    }
    if two_sided && n > 1 {
        test(values.column(n).iter().zip(values.column(0)).map(|(&b, &a)| b - a).collect());
    }
    ProcessCheck {
        pass,
        max_excess,
        max_z: Some(max_z),
        checks,
    }
}

/// Is `S~` a `Q`-martingale?
pub fn verify_martingale<F: Scalar>(ps: &PriceSystem<F>, mode: CheckMode<'_, F>, tol: F) -> Result<ProcessCheck<F>> {
    match mode {
        CheckMode::Lattice(noise) => check_lattice(&ps.shadow, &ps.weights, noise, tol, true),
        CheckMode::MonteCarlo => Ok(check_mc(&ps.shadow, &ps.weights, tol, true)),
    }
}

/// Is `values` (typically the shadow value `V`) a `Q`-supermartingale?
pub fn supermartingale_check<F: Scalar>(
    values: &Array2<F>,
    ps: &PriceSystem<F>,
    mode: CheckMode<'_, F>,
    tol: F,
) -> Result<ProcessCheck<F>> {
    if values.dim() != ps.shadow.dim() {
        return Err(EngineError::Contract("value panel and price system shapes differ".into()));
    }
    match mode {
        CheckMode::Lattice(noise) => check_lattice(values, &ps.weights, noise, tol, false),
        CheckMode::MonteCarlo => Ok(check_mc(values, &ps.weights, tol, false)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyEstimate<F> {
    /// Sample estimate of `E V(dQ/dP)`.
    pub estimate: Estimate<F>,
    /// Largest single path's share of `sum |V(w)|`.
    pub max_share: F,
    pub finite: bool,
}

/// Generalized relative entropy `E V(dQ/dP)` with an empirical tail check.
pub fn entropy_membership<F: Scalar>(ps: &PriceSystem<F>, v: impl Fn(F) -> Result<F>) -> EntropyEstimate<F> {
    let vals: Result<Vec<F>> = ps.weights.iter().map(|&w| v(w)).collect();
    let Ok(vals) = vals else {
        return EntropyEstimate {
            estimate: Estimate {
                mean: F::infinity(),
                se: F::nan(),
            },
            max_share: F::one(),
            finite: false,
        };
    };
    let total: F = vals.iter().map(|x| x.abs()).sum();
    let max_share = if total > F::zero() {
        vals.iter().map(|x| x.abs()).fold(F::zero(), F::max) / total
    } else {
        F::zero()
    };
    let estimate = stats::mean_se(&vals);
    EntropyEstimate {
        estimate,
        max_share,
        finite: estimate.mean.is_finite() && max_share < F::lit(0.5),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolarityReport<F> {
    /// `E[X Y]` with `Y = y dQ/dP`.
    pub lhs: Estimate<F>,
    /// `x y`.
    pub rhs: F,
    pub pass: bool,
}

/// `E[X_T y dQ/dP] <= x y` for terminal wealths `X_T`.
pub fn polarity_check<F: Scalar>(
    terminal: &[F],
    ps: &PriceSystem<F>,
    x: F,
    y: F,
    mode: CheckMode<'_, F>,
    tol: F,
) -> Result<PolarityReport<F>> {
    if terminal.len() != ps.weights.len() {
        return Err(EngineError::Contract("terminal wealth and weights differ in length".into()));
    }
    let deflator: Vec<F> = ps.weights.iter().map(|&w| w * y).collect();
    let mut lhs = stats::weighted_mean_se(terminal, &deflator);
    let rhs = x * y;
    let slack = match mode {
        CheckMode::Lattice(_) => {
            lhs.se = F::zero();
            tol
        }
        CheckMode::MonteCarlo => F::lit(3.0) * lhs.se + tol,
    };
    Ok(PolarityReport {
        lhs,
        rhs,
        pass: lhs.mean <= rhs + slack,
    })
}
