use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes (or vector lengths) do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value fell outside the domain an operation requires.
    #[error("domain error in {context}: {details}")]
    Domain {
        context: &'static str,
        details: String,
    },

    /// A configuration is internally inconsistent or unsatisfiable.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted (non-finite loss or gradient).
    #[error("training error at step {step}: {details}")]
    Training { step: u64, details: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Image file does not parse as binary PPM (P6, maxval 255).
    #[error("malformed image: {0}")]
    MalformedImage(String),

    /// Checkpoint payload is structurally broken.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Whole-file checksum does not match the stored trailer.
    #[error("checkpoint checksum failure")]
    ChecksumMismatch,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn domain(context: &'static str, details: impl ToString) -> Self {
        Error::Domain {
            context,
            details: details.to_string(),
        }
    }
}
