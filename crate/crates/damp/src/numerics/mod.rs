//! Minimal reverse-mode automatic differentiation over dense f64 matrices,
//! plus the LSTM cells, RMSProp optimizer, gradient-check harness and
//! checkpoint format the model layer is built on.

mod checkpoint;
mod gradcheck;
mod graph;
mod lstm;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use lstm::{bilstm_encode, lstm_cell, BiLstmOutput, LstmParamNodes};
pub use optim::{ParameterStore, RmsPropConfig};
pub(crate) use optim::fnv1a;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by graph construction and execution.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("grad_check requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
