use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("softmax row {row} has no allowed entry")]
    DegenerateRow { row: usize },

    #[error("row {row} has near-zero norm and cannot be normalized")]
    Normalization { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no modality pair has a valid positive in this batch")]
    EmptyLoss,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("fragment placement failed: {0}")]
    Capacity(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{0}: bad magic bytes")]
    BadMagic(PathBuf),

    #[error("{path}: unsupported container version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },

    #[error("{path}: dtype mismatch (expected code {expected:#04x}, found {found:#04x})")]
    DtypeMismatch { path: PathBuf, expected: u8, found: u8 },

    #[error("{path}: truncated payload ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures caused by the filesystem or on-disk formats rather
    /// than by a violated numerical contract.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::BadMagic(_)
                | Error::UnsupportedVersion { .. }
                | Error::DtypeMismatch { .. }
                | Error::Truncated { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
