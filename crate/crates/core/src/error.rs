//! Error types for the denoising pipeline.

use thiserror::Error;

/// Errors raised while ingesting or preparing data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("frames disagree on dimensions: {first:?} vs {offending:?} (frame {index})")]
    MixedShapes {
        first: (usize, usize),
        offending: (usize, usize),
        index: usize,
    },
    #[error("not decodable as single-channel 2-D image data: {0}")]
    NonImageData(String),
    #[error("degenerate intensity range: p_low == p_high == {0}")]
    DegenerateRange(f64),
    #[error("patch size {patch} exceeds frame dimensions {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("few-shot subset of {requested} exceeds training-set size {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("dataset has an empty {0} split")]
    EmptySplit(&'static str),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Errors raised when constructing model graphs.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Errors raised by loss evaluation.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("window {window} too large for {height}x{width} input")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("contrastive batch of {0} embeddings is too small (need >= 4)")]
    BatchTooSmall(usize),
    #[error("embedding row {row} has norm {norm}, expected unit norm")]
    NonUnitNorm { row: usize, norm: f64 },
    #[error("non-finite loss term: {0}")]
    NonFiniteTerm(&'static str),
    #[error("invalid positive-pair index: {0}")]
    BadPairIndex(String),
}

/// Errors raised during training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Errors raised by metric computation.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("degenerate reference: {0} normalization denominator is zero")]
    DegenerateReference(&'static str),
    #[error("dataset has no test pairs to evaluate")]
    EmptyTestSet,
}

/// Errors raised by tiled inference and crop export.
#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("crop box ({row0}..{row1}, {col0}..{col1}) out of bounds for {height}x{width} frame")]
    CropOutOfBounds {
        row0: usize,
        row1: usize,
        col0: usize,
        col1: usize,
        height: usize,
        width: usize,
    },
}

/// Errors raised by the experiment harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// Top-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 invalid config, 3 data error,
    /// 4 training divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Model(ModelError::InvalidConfig(_))
            | Error::Train(TrainError::InvalidConfig(_))
            | Error::Harness(HarnessError::InvalidPlan(_)) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Train(TrainError::NonFiniteLoss { .. }) => 4,
            _ => 1,
        }
    }
}
