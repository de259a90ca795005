use crate::losses::LossBreakdown;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A config invariant was violated; the message names it.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad runtime input (shape mismatch, misaligned batches, empty where forbidden).
    #[error("input error: {0}")]
    Input(String),

    /// The requested operation needs a model component that is disabled.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Manifest or config text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// An image or checkpoint artifact could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Checkpoint/config version or dtype mismatch.
    #[error("version error: {0}")]
    Version(String),

    /// Training produced a non-finite loss; carries the offending breakdown.
    #[error("training diverged: non-finite loss ({breakdown:?})")]
    Divergence { breakdown: LossBreakdown },

    /// Grid aggregation found mismatched cells across runs.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
