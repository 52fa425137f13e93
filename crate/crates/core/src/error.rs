use std::path::PathBuf;

pub type Result<T, E = HvpError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HvpError {
    /// A caller violated an operation's precondition (shapes, ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file did not match its declared binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Training produced a non-finite loss; a diagnostic checkpoint was written.
    #[error("non-finite loss at step {step} (diagnostic checkpoint: {})", checkpoint.display())]
    NonFinite { step: u64, checkpoint: PathBuf },

    #[error("resume refused: {0}")]
    ResumeMismatch(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HvpError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HvpError::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        HvpError::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HvpError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::HvpError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
