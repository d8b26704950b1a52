//! Utility functions, convex conjugates, Young pairs and Orlicz norms.

use serde::Serialize;

use crate::{EngineError, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Domain {
    /// `U : (0, inf) -> R`; wealth must stay nonnegative.
    PositiveAxis,
    /// `U : R -> R`, bounded above with `U(0) = 0`.
    WholeLine,
}

/// Concave nondecreasing utility.
#[derive(Debug, Clone, PartialEq)]
pub enum UtilitySpec<F> {
    Log,
    /// `x^p / p` on the positive axis, `p < 1`, `p != 0`.
    Power { p: F },
    /// `(1 - exp(-a x)) / a` on the whole line.
    Exponential { a: F },
    /// `U(x) = x`; fails the bounded-above requirement, kept as a probe.
    Linear,
    /// `min(x, cap)` on the whole line.
    Capped { cap: F },
    /// Linear interpolation through `knots`, extended by the end slopes.
    PiecewiseLinear { knots: Vec<(F, F)>, domain: Domain },
}

impl<F: Scalar> UtilitySpec<F> {
    pub fn validate(&self) -> Result<()> {
        match self {
            UtilitySpec::Power { p } => {
                if !(*p < F::one()) || *p == F::zero() || !p.is_finite() {
                    return Err(EngineError::Configuration(format!(
                        "power utility needs p < 1 and p != 0, got {p}"
                    )));
                }
            }
            UtilitySpec::Exponential { a } => {
                if !(*a > F::zero()) {
                    return Err(EngineError::Configuration("exponential utility needs a > 0".into()));
                }
            }
            UtilitySpec::Capped { cap } => {
                if !cap.is_finite() {
                    return Err(EngineError::Configuration("cap must be finite".into()));
                }
            }
            UtilitySpec::PiecewiseLinear { knots, .. } => {
                if knots.is_empty() {
                    return Err(EngineError::Configuration("utility table is empty".into()));
                }
                if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(EngineError::Configuration(
                        "utility table abscissae must increase strictly".into(),
                    ));
                }
                let slopes = table_slopes(knots);
                if slopes.iter().any(|&s| s < F::zero()) {
                    return Err(EngineError::Configuration("utility table must be nondecreasing".into()));
                }
                if slopes.windows(2).any(|w| w[1] > w[0]) {
                    return Err(EngineError::Configuration("utility table must be concave".into()));
                }
            }
            UtilitySpec::Log | UtilitySpec::Linear => {}
        }
        Ok(())
    }

    pub fn domain(&self) -> Domain {
        match self {
            UtilitySpec::Log | UtilitySpec::Power { .. } => Domain::PositiveAxis,
            UtilitySpec::Exponential { .. } | UtilitySpec::Linear | UtilitySpec::Capped { .. } => Domain::WholeLine,
            UtilitySpec::PiecewiseLinear { domain, .. } => *domain,
        }
    }

    /// `U(x)`; `-inf` outside the positive axis for positive-axis utilities.
    pub fn eval(&self, x: F) -> F {
        if self.domain() == Domain::PositiveAxis && x < F::zero() {
            return F::neg_infinity();
        }
        match self {
            UtilitySpec::Log => x.ln(),
            UtilitySpec::Power { p } => {
                if x == F::zero() && *p < F::zero() {
                    F::neg_infinity()
                } else {
                    x.powf(*p) / *p
                }
            }
            UtilitySpec::Exponential { a } => (F::one() - (-*a * x).exp()) / *a,
            UtilitySpec::Linear => x,
            UtilitySpec::Capped { cap } => x.min(*cap),
            UtilitySpec::PiecewiseLinear { knots, .. } => table_eval(knots, x),
        }
    }

    /// One-sided derivative: right derivative if `right`, else left.
    pub fn slope(&self, x: F, right: bool) -> F {
        match self {
            UtilitySpec::Log => {
                if x > F::zero() {
                    x.recip()
                } else {
                    F::infinity()
                }
            }
            UtilitySpec::Power { p } => {
                if x > F::zero() {
                    x.powf(*p - F::one())
                } else {
                    F::infinity()
                }
            }
            UtilitySpec::Exponential { a } => (-*a * x).exp(),
            UtilitySpec::Linear => F::one(),
            UtilitySpec::Capped { cap } => {
                let below = if right { x < *cap } else { x <= *cap };
                if below {
                    F::one()
                } else {
                    F::zero()
                }
            }
            UtilitySpec::PiecewiseLinear { knots, .. } => {
                let slopes = table_slopes(knots);
                if slopes.is_empty() {
                    return F::zero();
                }
                // Segment k spans [x_k, x_{k+1}]; the end slopes extend outward.
                let seg = knots
                    .iter()
                    .skip(1)
                    .position(|&(xk, _)| if right { x < xk } else { x <= xk })
                    .unwrap_or(slopes.len() - 1);
                slopes[seg]
            }
        }
    }

    /// Closed-form `V(y) = sup_x (U(x) - x y)` where one is known.
    pub fn analytic_conjugate(&self, y: F) -> Option<F> {
        if !(y > F::zero()) {
            return None;
        }
        match self {
            UtilitySpec::Log => Some(-y.ln() - F::one()),
            UtilitySpec::Power { p } => {
                let q = *p / (*p - F::one());
                Some((F::one() - *p) / *p * y.powf(q))
            }
            UtilitySpec::Exponential { a } => Some((F::one() - y + y * y.ln()) / *a),
            UtilitySpec::Capped { cap } if y <= F::one() => Some(*cap * (F::one() - y)),
            _ => None,
        }
    }

    /// Analytic conjugate when available, numeric otherwise.
    pub fn conj(&self, y: F) -> Result<F> {
        match self.analytic_conjugate(y) {
            Some(v) => Ok(v),
            None => conjugate(self, y),
        }
    }

    pub fn name(&self) -> String {
        match self {
            UtilitySpec::Log => "log".into(),
            UtilitySpec::Power { p } => format!("power({p})"),
            UtilitySpec::Exponential { a } => format!("exp({a})"),
            UtilitySpec::Linear => "linear".into(),
            UtilitySpec::Capped { cap } => format!("capped({cap})"),
            UtilitySpec::PiecewiseLinear { knots, .. } => format!("table({} knots)", knots.len()),
        }
    }
}

fn table_slopes<F: Scalar>(knots: &[(F, F)]) -> Vec<F> {
    knots
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect()
}

fn table_eval<F: Scalar>(knots: &[(F, F)], x: F) -> F {
    if knots.len() == 1 {
        return knots[0].1;
    }
    let k = knots
        .windows(2)
        .position(|w| x <= w[1].0)
        .unwrap_or(knots.len() - 2);
    let (x0, u0) = knots[k];
    let (x1, u1) = knots[k + 1];
    u0 + (u1 - u0) / (x1 - x0) * (x - x0)
}

/// Where the maximization variable lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Line,
    /// `(0, inf)`: the supremum may be a limit at `0+`.
    OpenHalfLine,
    /// `[0, inf)`.
    ClosedHalfLine,
}

const EXPANSION_LIMIT: f64 = 1e15;
const REFINE_REL_WIDTH: f64 = 1e-10;

/// Supremum of a concave function: geometric bracket growth, then ternary
/// search. `None` when the function keeps increasing past `1e15`.
pub fn sup_concave<F: Scalar>(g: impl Fn(F) -> F, support: Support) -> Option<F> {
    let big = F::lit(EXPANSION_LIMIT);
    let tiny = F::min_positive_value().sqrt();
    let two = F::lit(2.0);
    let mut b = F::one();
    let mut gb = g(b);
    let mut best = gb;

    // Right side.
    let mut h = F::one();
    let mut moved = false;
    let mut prev = b;
    let mut c = b + h;
    let mut gc = g(c);
    while gc > gb {
        moved = true;
        prev = b;
        b = c;
        gb = gc;
        h = h * two;
        c = b + h;
        gc = g(c);
        if b > big {
            return None;
        }
    }
    best = best.max(gb);

    let a = if moved {
        prev
    } else {
        match support {
            Support::Line => {
                let mut h = F::one();
                let mut a = b - h;
                let mut ga = g(a);
                while ga > gb {
                    c = b;
                    b = a;
                    gb = ga;
                    h = h * two;
                    a = b - h;
                    ga = g(a);
                    if b < -big {
                        return None;
                    }
                }
                a
            }
            Support::OpenHalfLine | Support::ClosedHalfLine => {
                let mut a = b / two;
                let mut ga = g(a);
                while ga > gb {
                    c = b;
                    b = a;
                    gb = ga;
                    a = a / two;
                    ga = g(a);
                    if a < tiny {
                        let edge = if support == Support::ClosedHalfLine {
                            g(F::zero())
                        } else {
                            ga
                        };
                        return Some(edge.max(ga).max(gb));
                    }
                }
                if support == Support::ClosedHalfLine && b <= F::one() {
                    best = best.max(g(F::zero()));
                }
                a
            }
        }
    };
    best = best.max(gb);

    let (mut lo, mut hi) = (a, c);
    let three = F::lit(3.0);
    for _ in 0..400 {
        let scale = F::one().max(lo.abs()).max(hi.abs());
        if hi - lo <= F::lit(REFINE_REL_WIDTH) * scale {
            break;
        }
        let m1 = lo + (hi - lo) / three;
        let m2 = hi - (hi - lo) / three;
        let (g1, g2) = (g(m1), g(m2));
        best = best.max(g1).max(g2);
        if g1 < g2 {
            lo = m1;
        } else if g1 > g2 {
            hi = m2;
        } else {
            lo = m1;
            hi = m2;
        }
    }
    Some(best.max(g((lo + hi) / two)))
}

/// Numeric convex conjugate `V(y) = sup_x (U(x) - x y)`.
pub fn conjugate<F: Scalar>(u: &UtilitySpec<F>, y: F) -> Result<F> {
    let inf = || EngineError::ConjugateInfinite { y: y.as_f64() };
    if !(y > F::zero()) {
        return Err(inf());
    }
    let support = match u.domain() {
        Domain::PositiveAxis => Support::OpenHalfLine,
        Domain::WholeLine => Support::Line,
    };
    sup_concave(|x| u.eval(x) - x * y, support)
        .filter(|v| v.is_finite())
        .ok_or_else(inf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConjugateSource {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugateTable<F> {
    pub ys: Vec<F>,
    pub values: Vec<F>,
    pub source: ConjugateSource,
}

pub fn conjugate_table<F: Scalar>(u: &UtilitySpec<F>, ys: &[F], source: ConjugateSource) -> Result<ConjugateTable<F>> {
    let values = ys
        .iter()
        .map(|&y| match source {
            ConjugateSource::Analytic => u
                .analytic_conjugate(y)
                .ok_or_else(|| EngineError::Configuration(format!("no closed form for {}", u.name()))),
            ConjugateSource::Numeric => conjugate(u, y),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConjugateTable {
        ys: ys.to_vec(),
        values,
        source,
    })
}

/// `sup_{x >= 0} (x y - f(x))` for a convex `f`; the Young conjugate.
pub fn young_conjugate<F: Scalar>(f: impl Fn(F) -> F, y: F) -> Option<F> {
    sup_concave(|x| x * y - f(x), Support::ClosedHalfLine)
}

/// Left derivative of `U` at 0 from difference quotients `(U(0) - U(-h)) / h`
/// with one Richardson step; the step with the most stable extrapolate wins.
pub fn left_derivative_at_zero<F: Scalar>(u: &UtilitySpec<F>) -> F {
    let u0 = u.eval(F::zero());
    let dq = |h: F| (u0 - u.eval(-h)) / h;
    let two = F::lit(2.0);
    let mut h = F::lit(0.5);
    let mut d_prev = dq(h);
    let mut r_prev: Option<F> = None;
    let mut best = (F::infinity(), d_prev);
    for _ in 0..40 {
        let h2 = h / two;
        let d = dq(h2);
        let r = two * d - d_prev;
        if let Some(rp) = r_prev {
            let change = (r - rp).abs();
            if change < best.0 {
                best = (change, r);
            }
            if change == F::zero() {
                break;
            }
        }
        r_prev = Some(r);
        d_prev = d;
        h = h2;
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Delta2Estimate<F> {
    /// `Phi(2x) / Phi(x)` at the largest grid point.
    pub ratio_at_max: F,
    /// Largest ratio over the top decade of the grid.
    pub decade_max: F,
    /// Largest ratio over the decade below, if the grid reaches it.
    pub previous_decade_max: Option<F>,
    /// Empirical verdict: ratios finite and not growing across the last two decades.
    pub finite: bool,
}

/// Empirical `limsup Phi(2x)/Phi(x)` over the tail of `grid`.
pub fn delta2_ratio<F: Scalar>(phi: impl Fn(F) -> F, grid: &[F]) -> Result<Delta2Estimate<F>> {
    let mut xs: Vec<F> = grid.iter().copied().filter(|x| *x > F::zero()).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let x_max = *xs
        .last()
        .ok_or_else(|| EngineError::Indeterminate("empty Delta2 grid".into()))?;
    let ten = F::lit(10.0);
    let ratio = |x: F| {
        let base = phi(x);
        (base > F::zero()).then(|| phi(x + x) / base)
    };
    let clean = |r: F| if r.is_nan() { F::infinity() } else { r };
    let mut top = Vec::new();
    let mut prev = Vec::new();
    for &x in &xs {
        if let Some(r) = ratio(x) {
            if x >= x_max / ten {
                top.push(clean(r));
            } else if x >= x_max / (ten * ten) {
                prev.push(clean(r));
            }
        }
    }
    if top.is_empty() {
        return Err(EngineError::Indeterminate(
            "Phi vanishes on the top decade of the grid".into(),
        ));
    }
    let fold_max = |v: &[F]| v.iter().copied().fold(F::neg_infinity(), F::max);
    let decade_max = fold_max(&top);
    let previous_decade_max = (!prev.is_empty()).then(|| fold_max(&prev));
    let ratio_at_max = ratio(x_max).map(clean).unwrap_or(F::nan());
    let finite = decade_max.is_finite()
        && previous_decade_max.is_none_or(|p| decade_max <= p * (F::one() + F::lit(1e-9)));
    Ok(Delta2Estimate {
        ratio_at_max,
        decade_max,
        previous_decade_max,
        finite,
    })
}

/// Log-spaced grid `base * 10^(k / per_decade)`, `k = 0..=decades * per_decade`.
pub fn log_grid<F: Scalar>(base: F, decades: usize, per_decade: usize) -> Vec<F> {
    (0..=decades * per_decade)
        .map(|k| base * F::lit(10f64.powf(k as f64 / per_decade as f64)))
        .collect()
}

/// `Phi* (x) = -U(-x)` and its conjugate `Phi`, built from a whole-line utility.
#[derive(Debug, Clone)]
pub struct YoungPair<F> {
    utility: UtilitySpec<F>,
    /// Left derivative of `U` at 0.
    pub beta: F,
    v_beta: F,
    pub delta2: Option<Delta2Estimate<F>>,
}

impl<F: Scalar> YoungPair<F> {
    /// `0` on `[0, beta]`, `V(y) - V(beta)` beyond.
    pub fn phi(&self, y: F) -> F {
        if y <= self.beta {
            return F::zero();
        }
        match self.utility.conj(y) {
            Ok(v) => (v - self.v_beta).max(F::zero()),
            Err(_) => F::infinity(),
        }
    }

    pub fn phi_star(&self, x: F) -> F {
        -self.utility.eval(-x)
    }

    pub fn utility(&self) -> &UtilitySpec<F> {
        &self.utility
    }
}

pub fn young_pair<F: Scalar>(u: &UtilitySpec<F>) -> Result<YoungPair<F>> {
    u.validate()?;
    if u.domain() != Domain::WholeLine {
        return Err(EngineError::AssumptionViolation(
            "Young pair needs a utility on the whole line".into(),
        ));
    }
    let bound = upper_bound_probe(u);
    if !bound.bounded {
        return Err(EngineError::AssumptionViolation(format!(
            "{} is not bounded above",
            u.name()
        )));
    }
    let beta = left_derivative_at_zero(u);
    if !(beta > F::zero()) || !beta.is_finite() {
        return Err(EngineError::AssumptionViolation(format!(
            "left derivative at 0 must be positive and finite, got {beta}"
        )));
    }
    let v_beta = u.conj(beta)?;
    let mut pair = YoungPair {
        utility: u.clone(),
        beta,
        v_beta,
        delta2: None,
    };
    let grid = log_grid(beta, 6, 10);
    pair.delta2 = delta2_ratio(|y| pair.phi(y), &grid).ok();
    Ok(pair)
}

/// `inf { gamma > 0 : mean Phi(|X| / gamma) <= 1 }` on a finite sample.
pub fn luxemburg_norm<F: Scalar>(sample: &[F], phi: impl Fn(F) -> F) -> Result<F> {
    luxemburg_norm_with_tol(sample, phi, F::lit(1e-12))
}

/// Bisection on `gamma` until the bracket's relative width is at most `rel_tol`;
/// the upper end (inside the unit ball) is returned.
pub fn luxemburg_norm_with_tol<F: Scalar>(sample: &[F], phi: impl Fn(F) -> F, rel_tol: F) -> Result<F> {
    if sample.is_empty() {
        return Err(EngineError::Contract("Luxemburg norm of an empty sample".into()));
    }
    let max_abs = sample.iter().fold(F::zero(), |m, x| m.max(x.abs()));
    if max_abs == F::zero() {
        return Ok(F::zero());
    }
    let n = F::from_usize_lossy(sample.len());
    let modular = |gamma: F| sample.iter().map(|x| phi(x.abs() / gamma)).sum::<F>() / n;
    let two = F::lit(2.0);
    let mut hi = max_abs;
    while !(modular(hi) <= F::one()) {
        hi = hi * two;
        if !hi.is_finite() {
            return Err(EngineError::Indeterminate("Luxemburg bracket diverged".into()));
        }
    }
    let mut lo = hi;
    while modular(lo) <= F::one() {
        lo = lo / two;
        if lo == F::zero() {
            return Ok(hi);
        }
    }
    while hi - lo > rel_tol * hi {
        let mid = (lo + hi) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        if modular(mid) <= F::one() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpperBoundProbe<F> {
    pub estimate: F,
    pub bounded: bool,
}

/// Probes `U(10^k)`, `k = 0..=12`: bounded when the decade increments are
/// nonincreasing and the last one is negligible.
pub fn upper_bound_probe<F: Scalar>(u: &UtilitySpec<F>) -> UpperBoundProbe<F> {
    let vals: Vec<F> = (0..=12).map(|k| u.eval(F::lit(10f64.powi(k)))).collect();
    let incs: Vec<F> = vals.windows(2).map(|w| w[1] - w[0]).collect();
    let last = *vals.last().expect("probes");
    let tail = *incs.last().expect("increments");
    let shrinking = incs.windows(2).all(|w| w[1] <= w[0] + F::lit(1e-12));
    let bounded = last.is_finite() && shrinking && tail <= F::lit(1e-3) * F::one().max(last.abs());
    UpperBoundProbe {
        estimate: last,
        bounded,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport<F> {
    pub domain: Domain,
    pub upper_bound: UpperBoundProbe<F>,
    /// `Some(U(0) == 0)` for whole-line utilities.
    pub zero_at_origin: Option<bool>,
    pub nondecreasing: bool,
    pub concave: bool,
    /// `U(x) / x` at `x = -10, -100, -1000`.
    pub left_tail_slopes: Vec<F>,
    pub left_tail_superlinear: Option<bool>,
    pub delta2: Option<Delta2Estimate<F>>,
}

impl<F: Scalar> AssumptionReport<F> {
    pub fn all_pass(&self) -> bool {
        let shape = self.nondecreasing && self.concave;
        match self.domain {
            Domain::PositiveAxis => shape,
            Domain::WholeLine => {
                shape
                    && self.upper_bound.bounded
                    && self.zero_at_origin == Some(true)
                    && self.left_tail_superlinear == Some(true)
                    && self.delta2.is_some_and(|d| d.finite)
            }
        }
    }
}

pub fn check_assumptions<F: Scalar>(u: &UtilitySpec<F>) -> AssumptionReport<F> {
    let domain = u.domain();
    let grid: Vec<F> = match domain {
        Domain::WholeLine => (0..=80).map(|k| F::lit(-20.0 + 0.5 * k as f64)).collect(),
        Domain::PositiveAxis => log_grid(F::lit(1e-3), 6, 10),
    };
    let vals: Vec<F> = grid.iter().map(|&x| u.eval(x)).collect();
    let tol = |v: F| F::lit(1e-12) * (F::one() + v.abs());
    let nondecreasing = vals.windows(2).all(|w| w[1] >= w[0] - tol(w[0]));
    let concave = grid.windows(2).zip(vals.windows(2)).all(|(x, v)| {
        let mid = u.eval((x[0] + x[1]) / F::lit(2.0));
        let chord = (v[0] + v[1]) / F::lit(2.0);
        mid >= chord - tol(chord)
    });
    let upper_bound = upper_bound_probe(u);
    let (zero_at_origin, left_tail_slopes, left_tail_superlinear, delta2) = match domain {
        Domain::PositiveAxis => (None, Vec::new(), None, None),
        Domain::WholeLine => {
            let slopes: Vec<F> = [-10.0, -100.0, -1000.0]
                .iter()
                .map(|&x| u.eval(F::lit(x)) / F::lit(x))
                .collect();
            let increasing = slopes.windows(2).all(|w| w[1] > w[0]);
            let delta2 = young_pair(u).ok().and_then(|p| p.delta2);
            (Some(u.eval(F::zero()) == F::zero()), slopes, Some(increasing), delta2)
        }
    };
    AssumptionReport {
        domain,
        upper_bound,
        zero_at_origin,
        nondecreasing,
        concave,
        left_tail_slopes,
        left_tail_superlinear,
        delta2,
    }
}
