//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("{op}: non-finite input value")]
    NonFiniteInput { op: &'static str },

    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("depthwise_conv1d: kernel width {kernel} exceeds 2T+1 = {limit} for sequence length {seq_len}")]
    KernelTooWide {
        kernel: usize,
        seq_len: usize,
        limit: usize,
    },

    #[error("split_lastdim: widths sum to {got}, expected last extent {expected}")]
    WidthSumMismatch { got: usize, expected: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("cross_entropy: every target position is ignored")]
    AllTargetsIgnored,

    #[error("dimension schedule: 2^(order-1) = {divisor} does not divide model dimension {dim} (order {order})")]
    ScheduleIndivisible {
        dim: usize,
        order: usize,
        divisor: usize,
    },

    #[error("gnconv stage {stage}: {source}")]
    GnConvStage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("attention mask: query row {row} keeps no key")]
    FullyMaskedRow { row: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("task spec: {0}")]
    DegenerateTask(String),

    #[error("config parse error at line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("ablation cell `{cell}`: {source}")]
    AblationCell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_gnconv_stage(stage: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::GnConvStage {
            stage,
            source: Box::new(source),
        }
    }

    pub fn in_ablation_cell(cell: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |source| Error::AblationCell {
            cell: cell.to_string(),
            source: Box::new(source),
        }
    }
}
