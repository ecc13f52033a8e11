use thiserror::Error;

/// Errors surfaced by every public operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or incompatible shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid caller-supplied input (labels out of range, empty batches, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed or corrupted file.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged.
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// A detector could not be fitted.
    #[error("fit error: {0}")]
    Fit(String),

    /// A detector could not score a sample.
    #[error("score error: {0}")]
    Score(String),

    /// Operation invoked on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
