use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("degenerate variance at timestep {0}: sigma is zero")]
    DegenerateVariance(usize),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("template must contain exactly one placeholder, found {0}")]
    Placeholder(usize),

    #[error("unknown style family {0:?}")]
    UnknownFamily(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config hash mismatch: artifact {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("frozen parameters changed during training: {0}")]
    FrozenViolation(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    /// Errors caused by bad user input, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::ShapeMismatch { .. }
                | Error::TimestepOutOfRange { .. }
                | Error::UnknownToken(_)
                | Error::Placeholder(_)
                | Error::UnknownFamily(_)
                | Error::Config(_)
                | Error::HashMismatch { .. }
                | Error::Parse(_)
        )
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Parse(format!("csv: {other:?}")),
            }
        } else {
            Error::Parse(format!("csv: {e}"))
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
