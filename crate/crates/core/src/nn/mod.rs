//! Minimal reverse-mode autodiff over dense matrices and the tiny decoder-only
//! transformer built on top of it.

mod graph;
mod model;

pub use graph::{gelu, log_softmax_rows, Graph, Tensor};
pub use model::{Attachment, BatchForward, Model, Param, Placement, TransformerConfig};

use crate::linalg::LinalgError;
use thiserror::Error;

/// Errors from graph construction, the model, and gradient checking.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("backward requires a scalar (1x1) loss, got {rows}x{cols}")]
    NonScalarBackward { rows: usize, cols: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("target token {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: u32, vocab: usize },
    #[error("loss needs at least one supervised position")]
    NoSupervisedPositions,
    #[error("targets length {targets} does not match {positions} input positions")]
    TargetsLengthMismatch { targets: usize, positions: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` expects shape {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ParameterShapeMismatch {
        name: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("a low-rank attachment already exists for `{0}`")]
    AlreadyAttached(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
