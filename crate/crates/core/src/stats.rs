//! Fixed-order sample statistics.
//!
//! Every reduction here walks its input front to back so results do not
//! depend on how the values were produced.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate<F> {
    pub mean: F,
    /// Standard error of the mean; zero for exact lattice expectations.
    pub se: F,
}

pub fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::nan();
    }
    let mut s = F::zero();
    for &x in xs {
        s = s + x;
    }
    s / F::from_usize_lossy(xs.len())
}

pub fn mean_se<F: Scalar>(xs: &[F]) -> Estimate<F> {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Estimate { mean: m, se: F::zero() };
    }
    let mut ss = F::zero();
    for &x in xs {
        ss = ss + (x - m) * (x - m);
    }
    let var = ss / F::from_usize_lossy(n - 1);
    Estimate {
        mean: m,
        se: (var / F::from_usize_lossy(n)).sqrt(),
    }
}

/// Mean of `weights[i] * xs[i]` with its standard error.
pub fn weighted_mean_se<F: Scalar>(xs: &[F], weights: &[F]) -> Estimate<F> {
    let prod: Vec<F> = xs.iter().zip(weights).map(|(&x, &w)| x * w).collect();
    mean_se(&prod)
}

/// Conditional expectation `sum(w x) / sum(w)` over a block of equally
/// likely leaves.
pub fn conditional_mean<F: Scalar>(xs: &[F], weights: &[F]) -> F {
    let mut num = F::zero();
    let mut den = F::zero();
    for (&x, &w) in xs.iter().zip(weights) {
        num = num + w * x;
        den = den + w;
    }
    num / den
}
