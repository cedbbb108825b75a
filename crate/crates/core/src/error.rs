use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed manifest {path}, line {line}: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate audio_id `{0}` in manifest")]
    DuplicateAudioId(String),

    #[error("manifest not found: {0}")]
    ManifestMissing(PathBuf),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("failed to load audio for `{audio_id}`: {reason}")]
    AudioLoad { audio_id: String, reason: String },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no prefixes: both feature branches are disabled")]
    EmptyPrefix,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("checkpoint mismatch at tensor `{tensor}`: {reason}")]
    CheckpointMismatch { tensor: String, reason: String },

    #[error("frozen parameter group `{group}` changed (max |diff| = {max_abs_diff:e})")]
    FrozenViolation { group: String, max_abs_diff: f64 },

    #[error("target vocabulary has {0} tokens, at least 10 are required")]
    VocabTooSmall(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed SPICE file, line {line}: {reason}")]
    MalformedSpiceFile { line: usize, reason: String },

    #[error("retrieval index is empty")]
    EmptyIndex,

    #[error("audio ids do not align: {}", .0.join(", "))]
    IdMismatch(Vec<String>),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    SafeTensor(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code: 2 config, 3 data, 4 model, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigMismatch(_) | Error::InvalidArgument(_) => 2,
            Error::MalformedManifest { .. }
            | Error::DuplicateAudioId(_)
            | Error::ManifestMissing(_)
            | Error::EmptyCorpus
            | Error::AudioLoad { .. }
            | Error::UnsupportedFormat(_)
            | Error::MalformedSpiceFile { .. }
            | Error::IdMismatch(_)
            | Error::EmptyIndex
            | Error::Io { .. } => 3,
            Error::ShapeMismatch(_)
            | Error::DimensionMismatch(_)
            | Error::EmptyPrefix
            | Error::LengthMismatch(_)
            | Error::CheckpointMismatch { .. }
            | Error::FrozenViolation { .. }
            | Error::VocabTooSmall(_)
            | Error::NonFiniteLoss { .. }
            | Error::SafeTensor(_) => 4,
            Error::Tensor(_) | Error::Json(_) => 5,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedManifest { .. } => "MalformedManifest",
            Error::DuplicateAudioId(_) => "DuplicateAudioId",
            Error::ManifestMissing(_) => "ManifestMissing",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::AudioLoad { .. } => "AudioLoadError",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyPrefix => "EmptyPrefix",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::CheckpointMismatch { .. } => "CheckpointMismatch",
            Error::FrozenViolation { .. } => "FrozenViolation",
            Error::VocabTooSmall(_) => "VocabTooSmall",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::MalformedSpiceFile { .. } => "MalformedSpiceFile",
            Error::EmptyIndex => "EmptyIndex",
            Error::IdMismatch(_) => "IdMismatch",
            Error::Config { .. } => "ConfigError",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Tensor(_) => "TensorError",
            Error::SafeTensor(_) => "CheckpointFormat",
            Error::Json(_) => "JsonError",
            Error::Io { .. } => "IoError",
        }
    }
}
