use thiserror::Error;

/// Errors raised by the kernel-learning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("sample size too small: need at least {min}, got {got}")]
    SampleSize { min: usize, got: usize },

    #[error("feature maps were built from different frequency batches")]
    Provenance,

    #[error("kernel {0} has no closed form")]
    NoClosedForm(&'static str),

    #[error("kernel {0} is closed-form only and cannot be sampled")]
    ClosedFormOnly(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("training diverged at iteration {iter}: {message}")]
    Divergence { iter: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected, got })
    }
}
