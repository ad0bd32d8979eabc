use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("not enough records for split: required {required}, available {available}")]
    InsufficientRecords { required: usize, available: usize },

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("freeze policy {0} leaves no trainable tensor")]
    NothingToTrain(String),

    #[error("stage {stage}: non-finite loss at step {step}")]
    NonFiniteLoss { stage: String, step: usize },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    CheckpointTruncated,

    #[error("checkpoint checksum mismatch")]
    CheckpointChecksum,

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("length mismatch: {left_name} has {left} entries, {right_name} has {right}")]
    LengthMismatch {
        left_name: String,
        left: usize,
        right_name: String,
        right: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Coarse category used by the command line front end when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::InsufficientRecords { .. } => "data",
            Error::InvalidInput(_) | Error::LengthMismatch { .. } => "input",
            Error::InvalidConfig(_) | Error::Config(_) => "config",
            Error::TokenOutOfRange { .. } | Error::SequenceTooLong { .. } => "model",
            Error::NothingToTrain(_) | Error::NonFiniteLoss { .. } => "training",
            Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated
            | Error::CheckpointChecksum
            | Error::CheckpointFormat(_)
            | Error::ShapeMismatch { .. }
            | Error::MissingTensor(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
