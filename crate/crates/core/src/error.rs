use thiserror::Error;

/// Errors raised by reconciliation, estimation and I/O routines.
#[derive(Debug, Error)]
pub enum ReconError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("constraint `{name}` domain error at input {input:?}: {reason}")]
    Domain {
        name: String,
        input: Vec<f64>,
        reason: String,
    },

    #[error("constraint evaluation failed on row {row}: {source}")]
    RowFailure {
        row: usize,
        #[source]
        source: Box<ReconError>,
    },

    #[error("unknown constraint `{0}`")]
    UnknownConstraint(String),

    #[error("invalid parameters for `{name}`: {reason}")]
    InvalidParams { name: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("projection fell back on {fallbacks} of {total} rows")]
    ProjectionFailed { fallbacks: usize, total: usize },

    #[error("baseline CRPS is zero for series {0}")]
    ZeroBaseline(usize),

    #[error("incoherent output from {method}: max residual {max_residual:e} above tolerance {tol:e}")]
    Incoherent {
        method: String,
        max_residual: f64,
        tol: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ReconError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReconError {
    pub fn context(self, context: impl Into<String>) -> Self {
        ReconError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, ReconError>;
