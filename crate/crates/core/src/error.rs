use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    TrainingDiverged { epoch: Option<usize> },

    #[error("no counterfactual found within {steps} steps ({restarts} restarts)")]
    CfeNotFound { steps: usize, restarts: usize },

    #[error("orientation error: segment endpoints do not straddle the 0.5 level")]
    Orientation,

    #[error("generation error: {0}")]
    Generation(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("distance undefined for an empty point set")]
    UndefinedDistance,

    #[error("matrix is singular or not positive definite")]
    SingularMatrix,

    #[error("experiment invalid: {0}")]
    ExperimentInvalid(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputShape { .. } => "input_shape",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::CfeNotFound { .. } => "cfe_not_found",
            Error::Orientation => "orientation",
            Error::Generation(_) => "generation",
            Error::Sampling(_) => "sampling",
            Error::UndefinedDistance => "undefined_distance",
            Error::SingularMatrix => "singular_matrix",
            Error::ExperimentInvalid(_) => "experiment_invalid",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
