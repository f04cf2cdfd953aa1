use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] discopatch_core::Error),

    #[error("{path}: unsupported image format: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed data: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
