use std::path::PathBuf;

use crate::curation::QualityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} out of range for schedule with {steps} steps")]
    IndexOutOfRange { t: usize, steps: usize },
    #[error(transparent)]
    InvalidSpec(#[from] maskdiff_nn::NnError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("image size mismatch: {0}")]
    SizeMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("non-finite latent at timestep {t}")]
    NonFiniteLatent { t: usize },
    #[error("mask sampling budget exhausted: accepted {accepted} of {requested} after {draws} draws (acceptance rate {rate:.3})")]
    BudgetExhausted { requested: usize, accepted: usize, draws: usize, rate: f64 },
    #[error("feature vector has zero norm ({0})")]
    ZeroNorm(String),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no reference images given")]
    EmptyReferences,
    #[error("prediction value {0} outside [0, 1]")]
    PredictionOutOfRange(f32),
    #[error("images without masks: {}", .0.join(", "))]
    MissingMask(Vec<String>),
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("invalid trigger token `{0}`: {1}")]
    InvalidToken(String, String),
    #[error("filtering kept none of {} generated pairs", .0.entries.len())]
    ZeroKept(Box<QualityReport>),
    #[error("manifest incomplete: {0}")]
    IncompleteManifest(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<Error> },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnreadableFile { path: path.into(), reason: reason.to_string() }
    }
}
