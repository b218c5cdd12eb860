use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // audio
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("audio too short: {len} samples, need at least {needed}")]
    AudioTooShort { len: usize, needed: usize },

    // segmenter
    #[error("recording is {duration_s:.2} s, shorter than the {clip_s} s clip")]
    InsufficientAudio { duration_s: f64, clip_s: f64 },
    #[error("no candidate window reaches voiced coverage {min_ratio}")]
    InsufficientVoiced { min_ratio: f64 },
    #[error("only {have} candidate windows for {need} clips")]
    TooFewCandidates { have: usize, need: usize },

    // descriptors
    #[error("frame too short: {len} samples, need {needed}")]
    FrameTooShort { len: usize, needed: usize },
    #[error("need at least two periods or amplitudes, got {0}")]
    TooFewPeriods(usize),
    #[error("amplitude at index {0} is not positive")]
    NonPositiveAmplitude(usize),
    #[error("frame is unvoiced")]
    UnvoicedFrame,
    #[error("frame is silent")]
    SilentFrame,

    // features
    #[error("contour '{0}' has no present values")]
    EmptyContour(String),
    #[error("bad FVEC magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("FVEC dimension mismatch: header declares {expected} values, payload has {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),

    // models
    #[error("need at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    // evaluation
    #[error("label '{label}' has {have} participants, need at least {k}")]
    TooFewParticipants { label: String, have: usize, k: usize },
    #[error("cannot vote on an empty label list")]
    EmptyVote,
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("training split of fold {0} contains a single class")]
    FoldCollapse(usize),
    #[error("no participants match scenario filter")]
    EmptySelection,
    #[error("leakage: participant '{id}' used to fit {what} in fold {fold}")]
    Leakage { id: String, what: String, fold: usize },

    // manifest / config
    #[error("schema violation at {at}: {msg}")]
    SchemaViolation { at: String, msg: String },
    #[error("duplicate participant id '{0}'")]
    DuplicateId(String),
    #[error("{at}: file not found: {path}")]
    MissingFile { at: String, path: PathBuf },
    #[error("{at}: unknown label '{label}'")]
    UnknownLabel { at: String, label: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or configuration rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::SchemaViolation { .. }
                | Error::DuplicateId(_)
                | Error::MissingFile { .. }
                | Error::UnknownLabel { .. }
                | Error::InvalidConfig(_)
                | Error::TooFewParticipants { .. }
                | Error::EmptySelection
                | Error::Json(_)
        )
    }
}
