use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape {0:?}: dimensions must be positive and match the data length")]
    InvalidShape(Vec<usize>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{field}: {message}")]
    OutOfRange { field: String, message: String },

    #[error("unknown condition tag `{0}`")]
    UnknownCondition(String),

    #[error("covariance of component {component} is not symmetric positive-definite")]
    NotPositiveDefinite { component: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("step {t} outside [1, {steps}]")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("alpha is zero at t = {0}")]
    ZeroAlpha(usize),

    #[error("guidance log: {0}")]
    Replay(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl Error {
    pub(crate) fn out_of_range(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::OutOfRange {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Prefixes the field path of an `OutOfRange` error, e.g. `edit_scale` -> `concepts[1].edit_scale`.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            Error::OutOfRange { field, message } => Error::OutOfRange {
                field: format!("{prefix}.{field}"),
                message,
            },
            other => other,
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Error::OutOfRange { field, .. } => Some(field),
            Error::Config { path, .. } => Some(path),
            _ => None,
        }
    }
}
