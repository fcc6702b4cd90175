use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing grid point for {symbol} on {date}: term {term_months} months, moneyness {moneyness}")]
    MissingPoint {
        date: NaiveDate,
        symbol: String,
        term_months: f64,
        moneyness: f64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("stale forward cache: network changed since the forward pass")]
    StaleCache,

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("rank-deficient regression design: column `{column}` is collinear")]
    RankDeficient { column: &'static str },

    #[error("degenerate factor assignment (scores {scores:?})")]
    DegenerateAssignment { scores: Vec<Vec<f64>> },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("objective is not finite at any start")]
    NonFiniteObjective,

    #[error("date ordering violation: {0}")]
    DateOrder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input (as opposed to a failure while computing).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::MissingPoint { .. }
                | Error::Validation(_)
                | Error::Dimension { .. }
                | Error::GridMismatch(_)
                | Error::Precondition(_)
                | Error::Checkpoint { .. }
                | Error::Csv(_)
        )
    }
}
