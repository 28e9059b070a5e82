use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("clip too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("refusing to truncate clip `{source_id}` of {len} samples to {target}")]
    TruncationRefused { source_id: String, len: usize, target: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in field `{field}`: {detail}")]
    Parse { field: String, detail: String },

    #[error("empty corpus: no parseable files")]
    EmptyCorpus,

    #[error("duplicate path in manifest: {0}")]
    Duplicate(String),

    #[error("cannot split: LOSO needs at least 2 subjects, found {0}")]
    CannotSplit(usize),

    #[error("empty sequence")]
    EmptySequence,

    #[error("model variant {0} has no attention block")]
    NoAttention(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("empty report: no evaluated utterances")]
    EmptyReport,

    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    Training { epoch: usize, batch: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { location: location.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
