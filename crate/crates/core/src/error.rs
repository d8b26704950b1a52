use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model {theta}: {source}")]
    AtTheta {
        theta: usize,
        #[source]
        source: Box<EngineError>,
    },

    #[error("conjugate is infinite at y = {y}")]
    ConjugateInfinite { y: f64 },

    #[error("utility assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("no consistent price system constructible: {0}")]
    NoCpsConstructible(String),

    #[error("strategy infeasible for model {theta}: {reason}")]
    Infeasible { theta: usize, reason: String },

    #[error("no feasible iterate found")]
    NoFeasiblePoint,

    #[error("oracle too large: {combinations} policy combinations exceed budget {budget}")]
    OracleTooLarge { combinations: u128, budget: u128 },

    #[error("indeterminate: {0}")]
    Indeterminate(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl EngineError {
    pub fn at_theta(self, theta: usize) -> Self {
        EngineError::AtTheta {
            theta,
            source: Box::new(self),
        }
    }

    /// Innermost error with any theta context stripped.
    pub fn root(&self) -> &EngineError {
        match self {
            EngineError::AtTheta { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
