use std::path::PathBuf;

/// Errors raised by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error(
        "stride {stride} does not divide {span} along {axis} (input {input}, kernel {kernel}, padding {padding})"
    )]
    Divisibility {
        axis: &'static str,
        input: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        span: i64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition not met for {method}: {reason}")]
    Precondition {
        method: &'static str,
        reason: String,
    },
    #[error("layer {layer} cannot be certified: {reason}")]
    Uncertifiable { layer: usize, reason: String },
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
