use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated stream while reading {0}")]
    Truncated(String),

    #[error("trailing bytes after the declared payload")]
    TrailingBytes,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate pair_id {0}")]
    DuplicatePairId(u64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss or gradient.
    #[error("numeric failure at epoch {epoch}, batch {batch}: {detail}")]
    Numeric {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("report serialization failed: {0}")]
    Report(String),

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True when the root cause is a non-finite loss or gradient.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
