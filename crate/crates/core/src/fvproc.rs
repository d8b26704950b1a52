//! Finite-variation strategies on a grid, the enumeration metric on
//! nondecreasing paths, and tail-average (Komlós-type) smoothing.

use ndarray::{Array2, ArrayView1};
use num_integer::Integer;
use serde::Serialize;

use crate::scenario::{NoisePanel, TimeGrid};
use crate::{EngineError, Result, Scalar};

/// Nondecreasing right-continuous step function with value 0 at time 0.
///
/// `jumps[i]` is the jump executed at grid time `i`; `jumps[0]` is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonePath<F> {
    grid: TimeGrid<F>,
    jumps: Vec<F>,
}

impl<F: Scalar> MonotonePath<F> {
    pub fn new(grid: TimeGrid<F>, jumps: Vec<F>) -> Result<Self> {
        if jumps.len() != grid.steps() + 1 {
            return Err(EngineError::Contract(format!(
                "path has {} jumps, grid needs {}",
                jumps.len(),
                grid.steps() + 1
            )));
        }
        if jumps[0] != F::zero() {
            return Err(EngineError::Contract("path must start at 0".into()));
        }
        if let Some(j) = jumps.iter().find(|j| !(**j >= F::zero()) || !j.is_finite()) {
            return Err(EngineError::Contract(format!("negative or non-finite jump {j}")));
        }
        Ok(Self { grid, jumps })
    }

    pub fn zero(grid: TimeGrid<F>) -> Self {
        Self {
            grid,
            jumps: vec![F::zero(); grid.steps() + 1],
        }
    }

    pub fn grid(&self) -> &TimeGrid<F> {
        &self.grid
    }

    pub fn jumps(&self) -> &[F] {
        &self.jumps
    }

    /// Cumulative value at every grid index.
    pub fn values(&self) -> Vec<F> {
        let mut acc = F::zero();
        self.jumps
            .iter()
            .map(|&j| {
                acc = acc + j;
                acc
            })
            .collect()
    }

    pub fn value_at_index(&self, i: usize) -> F {
        self.jumps[..=i.min(self.grid.steps())].iter().copied().sum()
    }

    pub fn terminal(&self) -> F {
        self.value_at_index(self.grid.steps())
    }

    /// Value at time `T * num / den`, located with integer arithmetic.
    pub fn value_at_fraction(&self, num: u64, den: u64) -> F {
        let n = self.grid.steps() as u128;
        let idx = (num as u128 * n) / den as u128;
        self.value_at_index(idx as usize)
    }

    /// Value at an arbitrary time in `[0, T]`.
    pub fn value_at_time(&self, t: F) -> F {
        let idx = (0..=self.grid.steps())
            .rev()
            .find(|&i| self.grid.time(i) <= t)
            .unwrap_or(0);
        self.value_at_index(idx)
    }
}

/// Weighted sum of paths; weights must be nonnegative.
pub fn convex_combination<F: Scalar>(paths: &[&MonotonePath<F>], weights: &[F]) -> Result<MonotonePath<F>> {
    let first = paths
        .first()
        .ok_or_else(|| EngineError::Contract("empty combination".into()))?;
    if paths.len() != weights.len() {
        return Err(EngineError::Contract("weights and paths differ in length".into()));
    }
    let mut jumps = vec![F::zero(); first.jumps.len()];
    for (p, &w) in paths.iter().zip(weights) {
        if p.grid != first.grid {
            return Err(EngineError::Contract("paths on different grids".into()));
        }
        for (acc, &j) in jumps.iter_mut().zip(&p.jumps) {
            *acc = *acc + w * j;
        }
    }
    MonotonePath::new(first.grid, jumps)
}

/// `T` first, then `0, T/2, T/3, 2T/3, T/4, 3T/4, ...` in lowest terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationalEnumeration {
    points: Vec<(u64, u64)>,
}

impl RationalEnumeration {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(EngineError::Contract("enumeration needs at least one point".into()));
        }
        let mut points = Vec::with_capacity(len);
        points.push((1, 1));
        let mut den = 1u64;
        'outer: while points.len() < len {
            for num in 0..=den {
                if num.gcd(&den) != 1 || (num == den && den == 1) {
                    continue;
                }
                points.push((num, den));
                if points.len() == len {
                    break 'outer;
                }
            }
            den += 1;
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as `(numerator, denominator)` fractions of the horizon.
    pub fn fractions(&self) -> &[(u64, u64)] {
        &self.points
    }

    pub fn point<F: Scalar>(&self, k: usize, horizon: F) -> F {
        let (p, q) = self.points[k];
        horizon * F::lit(p as f64) / F::lit(q as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoValue<F> {
    pub value: F,
    /// Upper bound on the omitted tail `sum_{k >= K} 2^-k |f - g|`.
    pub truncation_bound: F,
}

/// Truncated metric `sum_{k<K} 2^-k |f(r_k) - g(r_k)|`.
pub fn rho<F: Scalar>(f: &MonotonePath<F>, g: &MonotonePath<F>, enumeration: &RationalEnumeration) -> Result<RhoValue<F>> {
    if f.grid != g.grid {
        return Err(EngineError::Contract("rho needs paths on one grid".into()));
    }
    let fv = f.values();
    let gv = g.values();
    let n = f.grid.steps() as u128;
    let half = F::lit(0.5);
    let mut weight = F::one();
    let mut value = F::zero();
    for &(p, q) in enumeration.fractions() {
        let idx = ((p as u128 * n) / q as u128) as usize;
        value = value + weight * (fv[idx] - gv[idx]).abs();
        weight = weight * half;
    }
    // weight is now 2^-K; the tail is at most 2^-(K-1) (f(T) + g(T)).
    let truncation_bound = weight * F::lit(2.0) * (f.terminal() + g.terminal());
    Ok(RhoValue { value, truncation_bound })
}

#[derive(Debug, Clone)]
pub struct KomlosAverages<F> {
    /// `averages[n]` is the mean of `seq[n..=2n]`.
    pub averages: Vec<MonotonePath<F>>,
    /// The last entry of `averages`.
    pub limit: MonotonePath<F>,
}

/// Mean with a compensated running sum and a corrected final division, so
/// that equal inputs average to themselves and small integer sums divide
/// with a single rounding.
fn exact_mean<F: Scalar>(xs: impl Iterator<Item = F>) -> F {
    let (mut hi, mut lo, mut len) = (F::zero(), F::zero(), F::zero());
    for x in xs {
        let s = hi + x;
        let bp = s - hi;
        lo = lo + ((hi - (s - bp)) + (x - bp));
        hi = s;
        len = len + F::one();
    }
    let q = hi / len;
    let r = (-q).mul_add(len, hi) + lo;
    q + r / len
}

/// Tail averages `(1/(n+1)) * sum_{j=n}^{2n} seq[j]` for every `n` with
/// `2n < seq.len()`.
///
/// The window grows with `n`, which is what makes the averages Cauchy for
/// i.i.d. sequences; the final (longest) window is the limit candidate.
pub fn komlos_average<F: Scalar>(seq: &[MonotonePath<F>]) -> Result<KomlosAverages<F>> {
    let first = seq
        .first()
        .ok_or_else(|| EngineError::Contract("cannot average an empty sequence".into()))?;
    if seq.iter().any(|p| p.grid != first.grid) {
        return Err(EngineError::Contract("sequence spans several grids".into()));
    }
    let width = first.jumps.len();
    let count = (seq.len() - 1) / 2 + 1;
    let mut averages = Vec::with_capacity(count);
    for n in 0..count {
        let window = &seq[n..=2 * n];
        let jumps: Vec<F> = (0..width)
            .map(|i| exact_mean(window.iter().map(|p| p.jumps[i])).max(F::zero()))
            .collect();
        averages.push(MonotonePath {
            grid: first.grid,
            jumps,
        });
    }
    let limit = averages.last().cloned().expect("at least one average");
    Ok(KomlosAverages { averages, limit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PointStatus {
    Pass,
    Fail,
    /// Jump of the limit exceeds the tolerance: not a continuity point.
    Excluded,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport<F> {
    pub status: Vec<PointStatus>,
    pub deviation: Vec<F>,
    pub checked: usize,
    pub passed: usize,
}

impl<F: Scalar> ContinuityReport<F> {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

/// Compare an average against the limit at `T` and at every grid time where
/// the limit's jump is at most `tol`.
pub fn converges_at_continuity_points<F: Scalar>(
    average: &MonotonePath<F>,
    limit: &MonotonePath<F>,
    tol: F,
) -> ContinuityReport<F> {
    let av = average.values();
    let lv = limit.values();
    let last = lv.len() - 1;
    let mut status = Vec::with_capacity(lv.len());
    let mut deviation = Vec::with_capacity(lv.len());
    let (mut checked, mut passed) = (0, 0);
    for i in 0..lv.len() {
        let d = (av[i] - lv[i]).abs();
        deviation.push(d);
        if i != last && limit.jumps[i] > tol {
            status.push(PointStatus::Excluded);
            continue;
        }
        checked += 1;
        if d <= tol {
            passed += 1;
            status.push(PointStatus::Pass);
        } else {
            status.push(PointStatus::Fail);
        }
    }
    ContinuityReport {
        status,
        deviation,
        checked,
        passed,
    }
}

/// Adaptedness class of a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PolicyTag {
    /// Same schedule on every path.
    Deterministic,
    /// Trades at step `i` depend on the lattice node reached at step `i`.
    Lattice,
}

/// `(H_up, H_dn, H0)` for every path; position `phi = H0 + H_up - H_dn`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy<F> {
    grid: TimeGrid<F>,
    h0: F,
    up: Array2<F>,
    dn: Array2<F>,
    policy: PolicyTag,
}

impl<F: Scalar> Strategy<F> {
    /// `up` and `dn` hold per-path jumps, `paths x (steps + 1)`, with a zero
    /// first column.
    pub fn new(grid: TimeGrid<F>, h0: F, up: Array2<F>, dn: Array2<F>, policy: PolicyTag) -> Result<Self> {
        let cols = grid.steps() + 1;
        if up.dim() != dn.dim() || up.ncols() != cols {
            return Err(EngineError::Contract(format!(
                "jump matrices {:?} / {:?} do not fit a grid with {cols} points",
                up.dim(),
                dn.dim()
            )));
        }
        if !h0.is_finite() {
            return Err(EngineError::Contract("H0 must be finite".into()));
        }
        for m in [&up, &dn] {
            if m.column(0).iter().any(|&j| j != F::zero()) {
                return Err(EngineError::Contract("transfer paths must start at 0".into()));
            }
            if m.iter().any(|&j| !(j >= F::zero()) || !j.is_finite()) {
                return Err(EngineError::Contract("transfer jumps must be nonnegative".into()));
            }
        }
        Ok(Self { grid, h0, up, dn, policy })
    }

    pub fn zero(grid: TimeGrid<F>, paths: usize) -> Self {
        let z = Array2::zeros((paths, grid.steps() + 1));
        Self {
            grid,
            h0: F::zero(),
            up: z.clone(),
            dn: z,
            policy: PolicyTag::Deterministic,
        }
    }

    pub fn grid(&self) -> &TimeGrid<F> {
        &self.grid
    }

    pub fn h0(&self) -> F {
        self.h0
    }

    pub fn paths(&self) -> usize {
        self.up.nrows()
    }

    pub fn policy(&self) -> PolicyTag {
        self.policy
    }

    pub fn up_jumps(&self) -> &Array2<F> {
        &self.up
    }

    pub fn dn_jumps(&self) -> &Array2<F> {
        &self.dn
    }

    pub fn up_row(&self, path: usize) -> ArrayView1<'_, F> {
        self.up.row(path)
    }

    pub fn dn_row(&self, path: usize) -> ArrayView1<'_, F> {
        self.dn.row(path)
    }

    pub fn up_path(&self, path: usize) -> MonotonePath<F> {
        MonotonePath {
            grid: self.grid,
            jumps: self.up.row(path).to_vec(),
        }
    }

    pub fn dn_path(&self, path: usize) -> MonotonePath<F> {
        MonotonePath {
            grid: self.grid,
            jumps: self.dn.row(path).to_vec(),
        }
    }

    /// Position at every grid index of one path, accumulated step by step.
    pub fn positions(&self, path: usize) -> Vec<F> {
        let mut phi = self.h0;
        self.up
            .row(path)
            .iter()
            .zip(self.dn.row(path).iter())
            .map(|(&u, &d)| {
                phi = phi + u - d;
                phi
            })
            .collect()
    }

    /// Midpoint-style combination `a * self + (1 - a) * other`.
    pub fn blend(&self, other: &Self, a: F) -> Result<Self> {
        if self.up.dim() != other.up.dim() || self.grid != other.grid {
            return Err(EngineError::Contract("strategies differ in shape".into()));
        }
        let b = F::one() - a;
        let policy = if self.policy == other.policy {
            self.policy
        } else {
            PolicyTag::Lattice
        };
        Ok(Self {
            grid: self.grid,
            h0: a * self.h0 + b * other.h0,
            up: &self.up * a + &other.up * b,
            dn: &self.dn * a + &other.dn * b,
            policy,
        })
    }

    /// Deterministic: identical rows. Lattice: jumps at step `i` agree across
    /// all leaves that share the history up to step `i`.
    pub fn is_adapted(&self, noise: &NoisePanel<F>) -> bool {
        if noise.paths() != self.paths() {
            return false;
        }
        match self.policy {
            PolicyTag::Deterministic => {
                let (u0, d0) = (self.up.row(0), self.dn.row(0));
                (1..self.paths()).all(|m| self.up.row(m) == u0 && self.dn.row(m) == d0)
            }
            PolicyTag::Lattice => {
                if !noise.is_lattice() {
                    return false;
                }
                (0..=self.grid.steps()).all(|i| {
                    (0..noise.nodes_at(i).unwrap_or(0)).all(|node| {
                        let block = noise.node_block(i, node).expect("lattice");
                        let first = block.start;
                        block.into_iter().all(|m| {
                            self.up[[m, i]] == self.up[[first, i]] && self.dn[[m, i]] == self.dn[[first, i]]
                        })
                    })
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn path(g: TimeGrid<f64>, jumps: &[f64]) -> MonotonePath<f64> {
        MonotonePath::new(g, jumps.to_vec()).unwrap()
    }

    #[test]
    fn enumeration_prefix() {
        let e = RationalEnumeration::new(9).unwrap();
        assert_eq!(
            e.fractions(),
            &[(1, 1), (0, 1), (1, 2), (1, 3), (2, 3), (1, 4), (3, 4), (1, 5), (2, 5)]
        );
        let big = RationalEnumeration::new(500).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &(p, q) in big.fractions() {
            assert!(p <= q);
            assert!(seen.insert((p, q)));
        }
    }

    #[test]
    fn rejects_bad_paths() {
        let g = grid(2);
        assert!(MonotonePath::new(g, vec![0.0, -1.0, 0.0]).is_err());
        assert!(MonotonePath::new(g, vec![1.0, 0.0, 0.0]).is_err());
        assert!(MonotonePath::new(g, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn rho_identity_and_terminal_term() {
        let g = grid(4);
        let e = RationalEnumeration::new(16).unwrap();
        let f = path(g, &[0.0, 0.5, 0.0, 1.0, 0.25]);
        assert_eq!(rho(&f, &f, &e).unwrap().value, 0.0);
        let zero = MonotonePath::zero(g);
        let jump_at_t = path(g, &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let r = rho(&zero, &jump_at_t, &e).unwrap();
        assert!(r.value >= 1.0);
        // Only r_0 = T sees the jump.
        assert_eq!(r.value, 1.0);
        assert!(rho(&f, &path(grid(3), &[0.0; 4]), &e).is_err());
    }

    #[test]
    fn rho_of_identity_ramp_against_direct_sum() {
        // g(t) = t sampled on a fine grid: g(r) = floor(r N) / N.
        let n = 720;
        let g = grid(n);
        let mut jumps = vec![1.0 / n as f64; n + 1];
        jumps[0] = 0.0;
        let ramp = path(g, &jumps);
        let zero = MonotonePath::zero(g);
        let e = RationalEnumeration::new(64).unwrap();
        let r = rho(&zero, &ramp, &e).unwrap();

        // Oracle: walk the enumeration independently with exact index arithmetic.
        let mut expected = 0.0;
        let mut k = 0i32;
        let mut push = |p: u64, q: u64, k: &mut i32| {
            let idx = (p * n as u64 / q) as f64;
            expected += 2f64.powi(-*k) * idx / n as f64;
            *k += 1;
        };
        push(1, 1, &mut k);
        'done: for q in 1u64.. {
            for p in 0..=q {
                if num_integer::gcd(p, q) != 1 || (p == 1 && q == 1) {
                    continue;
                }
                push(p, q, &mut k);
                if k == 64 {
                    break 'done;
                }
            }
        }
        assert!((r.value - expected).abs() < 1e-14, "{} vs {}", r.value, expected);
        assert!((r.truncation_bound - 2f64.powi(-63)).abs() < 1e-30);
    }

    #[test]
    fn komlos_constant_sequence_is_fixed() {
        let g = grid(5);
        let f = path(g, &[0.0, 0.1, 0.0, 0.3, 0.0, 0.2]);
        let seq = vec![f.clone(); 9];
        let k = komlos_average(&seq).unwrap();
        let e = RationalEnumeration::new(32).unwrap();
        assert_eq!(k.averages.len(), 5);
        for a in &k.averages {
            assert_eq!(rho(a, &f, &e).unwrap().value, 0.0);
        }
        let rep = converges_at_continuity_points(&k.averages[2], &k.limit, 0.0);
        assert_eq!(rep.passed, rep.checked);
        assert!(rep.status.iter().all(|s| *s != PointStatus::Fail));
    }

    #[test]
    fn komlos_alternating_sequence() {
        let g = grid(3);
        let a = path(g, &[0.0, 1.0, 0.0, 0.5]);
        let b = path(g, &[0.0, 0.0, 1.0, 0.5]);
        let seq: Vec<_> = (0..41).map(|j| if j % 2 == 0 { a.clone() } else { b.clone() }).collect();
        let k = komlos_average(&seq).unwrap();
        // Window seq[n..=2n] has n+1 terms; odd n gives equal counts of a and b.
        for (n, avg) in k.averages.iter().enumerate() {
            let len = (n + 1) as f64;
            let a_count = (n..=2 * n).filter(|j| j % 2 == 0).count() as f64;
            let want = [0.0, a_count / len, (len - a_count) / len, 0.5];
            assert_eq!(avg.jumps(), &want, "n = {n}");
        }
        let mid = path(g, &[0.0, 0.5, 0.5, 0.5]);
        let e = RationalEnumeration::new(16).unwrap();
        assert_eq!(rho(&k.averages[19], &mid, &e).unwrap().value, 0.0);
        let d_small = rho(&k.averages[2], &mid, &e).unwrap().value;
        let d_large = rho(&k.averages[18], &mid, &e).unwrap().value;
        assert!(d_large < d_small);
    }

    #[test]
    fn alternating_with_one_jump_difference() {
        let g = grid(4);
        let a = path(g, &[0.0, 0.1, 0.1, 0.1, 0.1]);
        let b = path(g, &[0.0, 0.1, 0.5, 0.1, 0.1]);
        let seq: Vec<_> = (0..200).map(|j| if j % 2 == 0 { a.clone() } else { b.clone() }).collect();
        let k = komlos_average(&seq).unwrap();
        // Tolerance below the limit's jump at index 2: that time is excluded.
        let rep = converges_at_continuity_points(&k.averages[60], &k.limit, 0.2);
        assert_eq!(rep.status[2], PointStatus::Excluded);
        assert_eq!(rep.passed, rep.checked);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(komlos_average::<f64>(&[]).is_err());
    }

    #[test]
    fn strategy_positions_and_adaptedness() {
        let g = grid(2);
        let noise = NoisePanel::lattice(&g, 1, Some(1.0)).unwrap();
        let up = Array2::from_shape_vec((4, 3), vec![
            0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0,
        ])
        .unwrap();
        let dn = Array2::from_shape_vec((4, 3), vec![
            0.0, 0.0, 1.5, //
            0.0, 0.0, 1.5, //
            0.0, 0.0, 0.5, //
            0.0, 0.0, 0.5,
        ])
        .unwrap();
        let s = Strategy::new(g, 0.5, up.clone(), dn, PolicyTag::Lattice).unwrap();
        assert_eq!(s.positions(0), vec![0.5, 1.5, 0.0]);
        assert_eq!(s.positions(3), vec![0.5, 0.5, 0.0]);
        assert!(s.is_adapted(&noise));

        // Trading at step 1 on information from step 1 is look-ahead.
        let mut peek = up;
        peek[[1, 1]] = 2.0;
        let dn = Array2::zeros((4, 3));
        let s = Strategy::new(g, 0.0, peek, dn, PolicyTag::Lattice).unwrap();
        assert!(!s.is_adapted(&noise));
    }

    fn arb_path(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..2.0, n).prop_map(|mut v| {
            v.insert(0, 0.0);
            v
        })
    }

    proptest! {
        #[test]
        fn rho_metric_axioms(a in arb_path(8), b in arb_path(8), c in arb_path(8)) {
            let g = grid(8);
            let e = RationalEnumeration::new(40).unwrap();
            let (f, h, k) = (path(g, &a), path(g, &b), path(g, &c));
            let fh = rho(&f, &h, &e).unwrap().value;
            let hf = rho(&h, &f, &e).unwrap().value;
            prop_assert_eq!(fh, hf);
            let fk = rho(&f, &k, &e).unwrap().value;
            let kh = rho(&k, &h, &e).unwrap().value;
            prop_assert!(fh <= fk + kh + 1e-12);
            if fh == 0.0 {
                for &(p, q) in e.fractions() {
                    prop_assert_eq!(f.value_at_fraction(p, q), h.value_at_fraction(p, q));
                }
            }
        }

        #[test]
        fn averages_stay_monotone_and_bounded(
            seqs in proptest::collection::vec(arb_path(6), 1..12)
        ) {
            let g = grid(6);
            let paths: Vec<_> = seqs.iter().map(|v| path(g, v)).collect();
            let cap = paths.iter().map(|p| p.terminal()).fold(0.0, f64::max);
            let k = komlos_average(&paths).unwrap();
            for a in &k.averages {
                prop_assert!(a.jumps().iter().all(|&j| j >= 0.0));
                prop_assert!(a.terminal() <= cap + 1e-12);
            }
        }
    }
}
