use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid rule dictionary: {0}")]
    InvalidDictionary(String),

    #[error("duplicate scan id `{0}`")]
    DuplicateScanId(String),

    #[error("no subject mapping for scan `{0}`")]
    MissingSubject(String),

    #[error("invalid label vector for scan `{0}`: no_apparent_disease contradicts disease flags")]
    InvalidLabel(String),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid subgroup pattern: {0}")]
    InvalidPattern(String),

    #[error("score for scan `{0}` is not present in the evaluation labels")]
    UnknownScan(String),

    #[error("score for scan `{scan_id}` is not finite or outside [0, 1]: {score}")]
    InvalidScore { scan_id: String, score: f64 },

    #[error("degenerate class: {0}")]
    DegenerateClass(String),

    #[error("too few resamples: {0}")]
    InsufficientResamples(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for failures of the filesystem itself, as opposed to bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
