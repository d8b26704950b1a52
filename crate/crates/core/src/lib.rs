#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Robust expected-utility maximization for a single risky asset traded under
//! proportional transaction costs.
//!
//! The engine simulates a finite family of price models on one shared noise
//! panel, prices finite-variation strategies with exact bid/ask bookkeeping,
//! checks consistent price systems, and maximizes the worst-case expected
//! utility over the model family.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what the CLI and reports use.

pub mod accounting;
pub mod cps;
pub mod error;
pub mod fvproc;
pub mod harness;
pub mod scalar;
pub mod scenario;
pub mod solver;
pub mod stats;
pub mod utility;

pub use error::{EngineError, Result};
pub use scalar::Scalar;

pub type TimeGrid = scenario::TimeGrid<f64>;
pub type NoisePanel = scenario::NoisePanel<f64>;
pub type ModelSpec = scenario::ModelSpec<f64>;
pub type ThetaGrid = scenario::ThetaGrid<f64>;
pub type ScenarioPanel = scenario::ScenarioPanel<f64>;

pub type MonotonePath = fvproc::MonotonePath<f64>;
pub type Strategy = fvproc::Strategy<f64>;

pub type CostSpec = accounting::CostSpec<f64>;
pub type AccountingLedger = accounting::AccountingLedger<f64>;

pub type PriceSystem = cps::PriceSystem<f64>;
pub type BandReport = cps::BandReport<f64>;

pub type UtilitySpec = utility::UtilitySpec<f64>;
pub type YoungPair = utility::YoungPair<f64>;

pub type RobustProblem = solver::RobustProblem<f64>;
pub type PolicyParams = solver::PolicyParams<f64>;
pub type SolveReport = solver::SolveReport<f64>;

/// Single-precision variants, mostly useful for memory-bound panels.
pub mod f32 {
    pub type TimeGrid = crate::scenario::TimeGrid<f32>;
    pub type NoisePanel = crate::scenario::NoisePanel<f32>;
    pub type ModelSpec = crate::scenario::ModelSpec<f32>;
    pub type ScenarioPanel = crate::scenario::ScenarioPanel<f32>;
    pub type Strategy = crate::fvproc::Strategy<f32>;
    pub type CostSpec = crate::accounting::CostSpec<f32>;
    pub type AccountingLedger = crate::accounting::AccountingLedger<f32>;
    pub type UtilitySpec = crate::utility::UtilitySpec<f32>;
}
