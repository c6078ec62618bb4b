use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode or encode {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("manifest not found: {0}")]
    ManifestMissing(PathBuf),

    #[error("malformed manifest record at line {line}: {message}")]
    ManifestMalformed { line: usize, message: String },

    #[error("manifest entry `{id}` references missing file {path}")]
    DanglingReference { id: String, path: PathBuf },

    #[error("unknown instance id {0}")]
    UnknownInstance(u16),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("comparison set is not target-free: {0}")]
    PurityViolation(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
