use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record at line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown misalignment at line {line}: {value:?}")]
    UnknownMisalignment { line: usize, value: String },

    #[error("unknown misalignment type {0:?}")]
    UnknownMisalignmentName(String),

    #[error("duplicate {what} {key:?} at line {line}")]
    Duplicate {
        what: &'static str,
        key: String,
        line: usize,
    },

    #[error("synthetic manifest references unknown triplets: {}", .0.join(", "))]
    DanglingTriplets(Vec<String>),

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("score {value} outside [0, 1]")]
    ScoreOutOfRange { value: f64 },

    #[error("scorer {scorer_id} failed on frame {frame_index} of {video_ref}: {message}")]
    Scorer {
        scorer_id: String,
        video_ref: String,
        frame_index: usize,
        message: String,
    },

    #[error("sample {sample}: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing scores for samples: {}", .0.join(", "))]
    MissingScores(Vec<String>),

    #[error("missing weights for samples: {}", .0.join(", "))]
    MissingWeights(Vec<String>),

    #[error("missing shared-caption masks for samples: {}", .0.join(", "))]
    MissingMasks(Vec<String>),

    #[error("no features for video {0:?}")]
    MissingFeatures(String),

    #[error("mask has {got} entries for {expected} tokens")]
    MaskLength { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parameter gradients requested without a recorded forward pass")]
    NoForwardPass,

    #[error("AUC undefined: need at least one positive and one negative label")]
    AucUndefined,

    #[error("missing score for class {class:?} and video {video_ref:?}")]
    MissingPairScore { class: String, video_ref: String },

    #[error("nothing to sweep")]
    NothingToSweep,

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} needs {path}, which does not exist")]
    MissingDependency { stage: String, path: PathBuf },

    #[error("{path} was produced under config {found}, current config is {expected}; rerun with --force")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 5 missing dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DigestMismatch { .. } | Error::NothingToSweep => 2,
            Error::NonFinite(_) => 4,
            Error::MissingDependency { .. } => 5,
            Error::Sample { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
