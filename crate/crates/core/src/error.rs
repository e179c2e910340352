use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: action out of range: {action} (expected 0..=8)")]
    ActionOutOfRange { line: usize, action: i64 },

    #[error("duplicate step (episode_id={episode_id}, t={t})")]
    DuplicateStep { episode_id: String, t: u32 },

    #[error("episode {episode_id}: {message}")]
    InvalidEpisode { episode_id: String, message: String },

    #[error("inconsistent group keys within episode {episode_id}")]
    InconsistentGroupKeys { episode_id: String },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },

    #[error("unknown group attribute: {0}")]
    UnknownAttribute(String),

    #[error("attribute {attribute} varies within episode {episode_id}")]
    AttributeVaries { attribute: String, episode_id: String },

    #[error("feature {0} is absent from every training step")]
    MissingFeature(String),

    #[error("invalid feature spec: {0}")]
    InvalidFeatureSpec(String),

    #[error("training data contains a single class (all harm or no harm)")]
    SingleClass,

    #[error("training data contains fewer than two distinct actions")]
    SingleAction,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite loss during optimization (check feature scaling)")]
    NonFiniteLoss,

    #[error("singular normal equations (increase ridge)")]
    Singular,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group {0} has zero safe probability")]
    ZeroSafeProbability(String),

    #[error("runs differ in more than alpha: {0}")]
    IncompatibleRuns(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
