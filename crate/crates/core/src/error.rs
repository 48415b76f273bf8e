use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("state is empty")]
    EmptyState,

    #[error("index {index} out of range (valid {lo}..={hi})")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("turn {turn} failed: {source}")]
    Turn {
        turn: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::TrainingDiverged { .. } => true,
            Error::Turn { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Short machine-readable name of the variant (the innermost one for
    /// turn failures).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::LayoutMismatch(_) => "layout_mismatch",
            Error::EmptyState => "empty_state",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Missing(_) => "missing",
            Error::Turn { source, .. } => source.kind(),
            Error::Format(_) => "format",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }

    /// Step index attached to numerical failures.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::NonFinite { step, .. } | Error::TrainingDiverged { step, .. } => Some(*step),
            Error::Turn { source, .. } => source.step(),
            _ => None,
        }
    }

    pub fn turn(&self) -> Option<usize> {
        match self {
            Error::Turn { turn, .. } => Some(*turn),
            _ => None,
        }
    }

    /// True for failures caused by malformed configuration or input files.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::Json(_)
            | Error::Format(_)
            | Error::LayoutMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::EmptyState => true,
            Error::Turn { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
