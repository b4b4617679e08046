use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // data
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("label column `{0}` not present in header")]
    MissingLabelColumn(String),
    #[error("non-numeric cell at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize },
    #[error("label at row {row} is not 0 or 1")]
    NonBinaryLabel { row: usize },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("split would leave one side empty")]
    DegenerateSplit,
    #[error("class {0} absent; stratification impossible")]
    ClassAbsent(u8),
    #[error("class {class} has {count} members, fewer than k = {k}")]
    TooFewPerClass { class: u8, count: usize, k: usize },

    // resample, learners
    #[error("only one class present")]
    SingleClass,
    #[error("minority class has {0} rows; at least 2 required")]
    MinorityTooSmall(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    // tsne
    #[error("perplexity search failed to bracket for row {row}")]
    PerplexityInfeasible { row: usize },
    #[error("{n} points exceeds the exact t-SNE cap of {cap}")]
    TooManyPoints { n: usize, cap: usize },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // vae
    #[error("input value outside [0, 1] for a Bernoulli decoder")]
    OutOfRangeInput,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    // metrics
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("labels must be 0 or 1")]
    NonBinary,
    #[error("no positive labels")]
    NoPositives,
    #[error("probability outside [0, 1]")]
    OutOfRange,
    #[error("train size {size} exceeds the {available} rows available")]
    SizeTooLarge { size: usize, available: usize },

    // explain
    #[error("{features} features exceeds the exact Shapley limit of {limit}")]
    TooManyFeatures { features: usize, limit: usize },
    #[error("model returned a non-finite prediction")]
    NonFinitePrediction,
    #[error("aggregation weights are all zero")]
    ZeroWeights,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    // configuration, persistence, io
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("container format error: {0}")]
    Format(String),
    #[error("run `{run}` failed: {source}")]
    Run { run: String, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// True for errors caused by the input data rather than configuration or IO.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::MissingFile(_)
            | Error::MissingLabelColumn(_)
            | Error::NonNumericCell { .. }
            | Error::NonBinaryLabel { .. }
            | Error::EmptyDataset
            | Error::InvalidDataset(_)
            | Error::DegenerateSplit
            | Error::ClassAbsent(_)
            | Error::Csv(_) => true,
            Error::Run { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
