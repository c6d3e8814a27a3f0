use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty training window")]
    EmptyTrainingWindow,

    /// The solver hit its iteration cap. Carries the last iterate so callers
    /// can inspect how far off it was.
    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite: pivot {pivot:.3e} at row {row} (dim {dim}, trace {trace:.3e})")]
    NotPositiveDefinite {
        row: usize,
        pivot: f64,
        dim: usize,
        trace: f64,
    },

    #[error("degenerate label set: need at least one positive and one negative (got {positives} positives, {negatives} negatives)")]
    DegenerateLabels { positives: usize, negatives: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFinite(_) | Error::NotPositiveDefinite { .. }
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
