use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<Option<usize>>,
        rhs: Vec<Option<usize>>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {op} with {limit} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: i64,
        limit: usize,
    },

    #[error("execution error: {0}")]
    Execution(String),

    #[error("variable {0} already exists")]
    VariableExists(String),

    #[error("variable {0} does not exist (reuse requested)")]
    VariableNotFound(String),

    #[error("variable {name} has shape {existing:?}, requested {requested:?}")]
    VariableShapeConflict {
        name: String,
        existing: Vec<usize>,
        requested: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<Option<usize>>),

    #[error("metric {0}: no data accumulated")]
    NoDataAccumulated(String),

    #[error("feature {0} is not present in the input")]
    MissingFeature(String),

    #[error("label {0} is not present in the input")]
    MissingLabel(String),

    #[error("label value {value} out of range [0, {n_classes})")]
    LabelOutOfRange { value: f64, n_classes: usize },

    #[error("invalid estimator spec: {0}")]
    InvalidSpec(String),

    #[error("NaN loss during training at step {step}")]
    NanLoss { step: u64 },

    #[error("input_fn produced no data")]
    EmptyInput,

    #[error("no trained model in {0}")]
    NoTrainedModel(PathBuf),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error(
        "checkpoint writer violation: {writer} attempted to write checkpoints owned by {owner}"
    )]
    LeaderViolation { writer: String, owner: String },

    #[error("parameter checksum mismatch in checkpoint at step {step}")]
    ChecksumMismatch { step: u64 },

    #[error("ESTIMATOR_RUN_CONFIG not set")]
    RunConfigNotSet,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("task {task} failed: {reason}")]
    TaskFailed { task: String, reason: String },

    #[error("hook error: {0}")]
    Hook(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[Option<usize>], rhs: &[Option<usize>]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn exec(msg: impl Into<String>) -> Self {
        Error::Execution(msg.into())
    }
}
