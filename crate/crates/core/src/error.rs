use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("pseudo-time {tau} outside the clamped interval [{lo}, {hi}]")]
    TauOutOfRange { tau: f64, lo: f64, hi: f64 },

    #[error("reverse ODE diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("label generation failed at index {index}: {source}")]
    LabelFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation failed for sample {index}: {source}")]
    SimulationFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("refined design: {0}")]
    Design(String),

    #[error("simulation unstable: {0}")]
    Unstable(String),

    #[error("Newton iteration did not converge: {0}")]
    NewtonFailed(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(expected: usize, found: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            found,
            context: context.into(),
        }
    }

    /// Strips `Stage` / `LabelFailed` / `SimulationFailed` wrappers to reach the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. }
            | Error::LabelFailed { source, .. }
            | Error::SimulationFailed { source, .. } => source.root(),
            other => other,
        }
    }
}
