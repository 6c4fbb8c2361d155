use std::path::PathBuf;

use p2g_numerics::NumericsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("token length exceeded: {needed} tokens needed, limit {limit}")]
    TokenLengthExceeded { needed: usize, limit: usize },
    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("task {0} already present in the bank")]
    DuplicateTask(usize),
    #[error("task id gap: expected {expected}, got {got}")]
    TaskGap { expected: usize, got: usize },
    #[error("prompts for task {0} are not marked trained")]
    UntrainedPrompts(usize),
    #[error("prompts for task {0} are frozen")]
    FrozenPrompts(usize),

    #[error("{what}: bad magic")]
    BadMagic { what: &'static str },
    #[error("{what}: unsupported version {found}")]
    VersionMismatch { what: &'static str, found: u32 },
    #[error("{what}: checksum mismatch{}", .task.map(|t| format!(" (task {t})")).unwrap_or_default())]
    ChecksumMismatch { what: &'static str, task: Option<usize> },
    #[error("{what}: truncated or oversized file")]
    Truncated { what: &'static str },

    #[error("class list is empty")]
    EmptyClasses,
    #[error("unknown class preset {0:?}")]
    UnknownPreset(String),
    #[error("top-c {c} out of range for {n} classes")]
    TopCOutOfRange { c: usize, n: usize },
    #[error("unknown shape class {0:?}")]
    UnknownClass(String),

    #[error("dataset: {0}")]
    Dataset(String),
    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("domain centroid bank is empty")]
    EmptyCentroidBank,
    #[error("prompt bank is empty")]
    EmptyBank,
    #[error("scheduler step {step} out of range 0..{total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),
    #[error("empty test set for task {0}")]
    EmptyTestSet(usize),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: impl Into<String>) -> impl FnOnce(Error) -> Error {
        let stage = stage.into();
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for errors caused by the user-supplied configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownPreset(_) | Error::EmptyClasses | Error::TopCOutOfRange { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
