use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// Every regime assigns zero density to the observation at data index `t`.
    #[error("likelihood underflow at t = {t}")]
    LikelihoodUnderflow { t: usize },

    #[error("regime {regime} has total weight {weight:e}, below the degenerate threshold")]
    DegenerateRegime { regime: usize, weight: f64 },

    #[error("M-step for regime {regime} did not converge: {reason}")]
    MStepFailure { regime: usize, reason: String },

    #[error("all EM restarts failed: {0}")]
    FitFailure(String),

    #[error("simulated mean {mean:e} at t = {t} exceeds the overflow bound")]
    SimulationOverflow { t: usize, mean: f64 },

    #[error("could not bracket the predictive median on day {day}")]
    BracketFailure { day: usize },

    #[error("input data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
