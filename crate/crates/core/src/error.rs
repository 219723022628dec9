use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("manifest line {line}: {reason}")]
    ManifestRow { line: usize, reason: String },

    #[error("duplicate clip id `{0}`")]
    DuplicateClip(String),

    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),

    #[error("incomplete pose track: {0}")]
    IncompleteTrack(String),

    #[error("malformed pose track: {0}")]
    PoseFormat(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("signal too short: {samples} samples, need at least {needed}")]
    SignalTooShort { samples: usize, needed: usize },

    #[error("feature matrix too short: {rows} rows, segment needs {needed}")]
    MatrixTooShort { rows: usize, needed: usize },

    #[error("feature cache: {0}")]
    Cache(String),

    #[error("no far-ankle candidate satisfies the distance tolerance")]
    NoFarAnkle,

    #[error("height cluster `{0}` is empty")]
    EmptyHeightCluster(&'static str),

    #[error("degenerate pose geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fold leakage: {0} clip(s) appear in both train and test sets")]
    FoldLeakage(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than data.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
