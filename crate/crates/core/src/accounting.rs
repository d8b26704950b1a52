//! Cash, position, liquidation value and shadow value of a strategy.
//!
//! Buying pays the ask `S`, selling receives the bid `(1 - lambda) S`. A jump
//! of `H_up`/`H_dn` at grid time `i` executes at `S_i`.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::Serialize;

use crate::fvproc::Strategy;
use crate::{EngineError, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSpec<F> {
    pub lambda: F,
    pub x0: F,
}

impl<F: Scalar> CostSpec<F> {
    pub fn new(lambda: F, x0: F) -> Result<Self> {
        if !(lambda > F::zero() && lambda < F::one()) {
            return Err(EngineError::Configuration(format!(
                "transaction cost must lie in (0, 1), got {lambda}"
            )));
        }
        if !x0.is_finite() {
            return Err(EngineError::Configuration("initial capital must be finite".into()));
        }
        Ok(Self { lambda, x0 })
    }

    pub fn bid_factor(&self) -> F {
        F::one() - self.lambda
    }

    /// Liquidation value of cash plus a position at ask `s`.
    pub fn liquidation(&self, cash: F, position: F, s: F) -> F {
        cash + position.pos() * self.bid_factor() * s - position.neg_part() * s
    }
}

/// Per-entry bookkeeping, every field `paths x (steps + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountingLedger<F> {
    pub cash: Array2<F>,
    pub position: Array2<F>,
    pub liq: Array2<F>,
    pub shadow: Option<Array2<F>>,
}

impl<F: Scalar> AccountingLedger<F> {
    pub fn paths(&self) -> usize {
        self.cash.nrows()
    }

    pub fn steps(&self) -> usize {
        self.cash.ncols() - 1
    }

    pub fn terminal_liq(&self) -> Vec<F> {
        self.liq.column(self.steps()).to_vec()
    }
}

/// One path's cash, position and liquidation value.
pub fn account_path<F: Scalar>(
    h0: F,
    up: ArrayView1<'_, F>,
    dn: ArrayView1<'_, F>,
    prices: ArrayView1<'_, F>,
    cost: &CostSpec<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = prices.len();
    let bid = cost.bid_factor();
    let s0 = prices[0];
    let mut cash = cost.x0 - h0.pos() * s0 + h0.neg_part() * s0 * bid;
    let mut phi = h0;
    let mut c = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for i in 0..n {
        let s = prices[i];
        cash = cash - s * up[i] + bid * s * dn[i];
        phi = phi + up[i] - dn[i];
        c.push(cash);
        p.push(phi);
        l.push(cost.liquidation(cash, phi, s));
    }
    (c, p, l)
}

pub fn run_ledger<F: Scalar>(strategy: &Strategy<F>, prices: &Array2<F>, cost: &CostSpec<F>) -> Result<AccountingLedger<F>> {
    if prices.dim() != strategy.up_jumps().dim() {
        return Err(EngineError::Contract(format!(
            "strategy shape {:?} does not match price panel {:?}",
            strategy.up_jumps().dim(),
            prices.dim()
        )));
    }
    let rows: Vec<_> = (0..prices.nrows())
        .into_par_iter()
        .map(|m| account_path(strategy.h0(), strategy.up_row(m), strategy.dn_row(m), prices.row(m), cost))
        .collect();
    let shape = prices.dim();
    let mut cash = Vec::with_capacity(shape.0 * shape.1);
    let mut position = Vec::with_capacity(shape.0 * shape.1);
    let mut liq = Vec::with_capacity(shape.0 * shape.1);
    for (c, p, l) in rows {
        cash.extend(c);
        position.extend(p);
        liq.extend(l);
    }
    Ok(AccountingLedger {
        cash: Array2::from_shape_vec(shape, cash).expect("shape"),
        position: Array2::from_shape_vec(shape, position).expect("shape"),
        liq: Array2::from_shape_vec(shape, liq).expect("shape"),
        shadow: None,
    })
}

/// Adds `V = cash + position * shadow_price`.
pub fn shadow_ledger<F: Scalar>(ledger: &AccountingLedger<F>, shadow_prices: &Array2<F>) -> Result<AccountingLedger<F>> {
    if shadow_prices.dim() != ledger.cash.dim() {
        return Err(EngineError::Contract("shadow panel shape mismatch".into()));
    }
    if shadow_prices.iter().any(|&s| !(s > F::zero())) {
        return Err(EngineError::Contract("shadow prices must be positive".into()));
    }
    let shadow = &ledger.cash + &(&ledger.position * shadow_prices);
    Ok(AccountingLedger {
        shadow: Some(shadow),
        ..ledger.clone()
    })
}

/// Entries where the shadow price lies in the bid/ask band but the
/// liquidation value exceeds the shadow value by more than round-off.
pub fn band_dominance_violations<F: Scalar>(
    ledger: &AccountingLedger<F>,
    prices: &Array2<F>,
    shadow_prices: &Array2<F>,
    lambda: F,
) -> Vec<(usize, usize)> {
    let Some(v) = ledger.shadow.as_ref() else {
        return Vec::new();
    };
    let eps = F::lit(64.0) * F::epsilon();
    let mut out = Vec::new();
    for ((m, i), &s) in prices.indexed_iter() {
        let st = shadow_prices[[m, i]];
        let in_band = (F::one() - lambda) * s <= st && st <= s;
        let scale = F::one() + ledger.liq[[m, i]].abs() + v[[m, i]].abs();
        if in_band && ledger.liq[[m, i]] > v[[m, i]] + eps * scale {
            out.push((m, i));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    NegativeLiquidation,
    OpenTerminalPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation<F> {
    pub path: usize,
    pub time_index: usize,
    pub kind: ViolationKind,
    pub value: F,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityReport<F> {
    pub admissible: bool,
    pub first_violation: Option<Violation<F>>,
}

/// Liquidation value nonnegative everywhere and the terminal position flat.
pub fn check_admissible_rplus<F: Scalar>(ledger: &AccountingLedger<F>) -> AdmissibilityReport<F> {
    let last = ledger.steps();
    for m in 0..ledger.paths() {
        for i in 0..=last {
            let l = ledger.liq[[m, i]];
            if !(l >= F::zero()) {
                return AdmissibilityReport {
                    admissible: false,
                    first_violation: Some(Violation {
                        path: m,
                        time_index: i,
                        kind: ViolationKind::NegativeLiquidation,
                        value: l,
                    }),
                };
            }
        }
        let phi = ledger.position[[m, last]];
        if phi != F::zero() {
            return AdmissibilityReport {
                admissible: false,
                first_violation: Some(Violation {
                    path: m,
                    time_index: last,
                    kind: ViolationKind::OpenTerminalPosition,
                    value: phi,
                }),
            };
        }
    }
    AdmissibilityReport {
        admissible: true,
        first_violation: None,
    }
}
