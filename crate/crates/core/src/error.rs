use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{op}: non-finite value produced ({detail})")]
    NonFinite { op: &'static str, detail: String },

    #[error("pruning policy violation: {0}")]
    Policy(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures decoding on-disk artifacts (checkpoints, datasets, configs).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic {
        found: Vec<u8>,
        expected: &'static str,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("header checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    HeaderChecksum { stored: u32, computed: u32 },

    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    PayloadChecksum { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("tensor {name}: {detail}")]
    ShapePayload { name: String, detail: String },

    #[error("{0}")]
    Records(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}
