//! A small, explicit differentiable layer library.
//!
//! Every layer keeps its parameters in [`Param`] tensors (row-major `f64`
//! values plus an accumulated gradient of the same shape). Forward passes
//! return traces that the matching backward pass consumes; backward passes
//! accumulate into `Param::grad` and return the gradient with respect to
//! the layer input.

mod charcnn;
mod checkpoint;
mod dense;
mod gradcheck;
pub mod linalg;
mod loss;
mod lstm;
mod optim;
mod param;

use thiserror::Error;

pub use charcnn::{char_cnn_forward, CharCnn, CnnTrace};
pub use checkpoint::{read_checkpoint, restore_params, write_checkpoint, RawCheckpoint, Tensor};
pub use dense::{dense_forward, Activation, Dense};
pub use gradcheck::{
    gradient_check, gradient_check_terms, GradCheckConfig, GradCheckReport, GroupReport,
};
pub use loss::{log_softmax, softmax, softmax_cross_entropy};
pub use lstm::{bilstm_forward, BiLstm, BiLstmTrace, Lstm, LstmTrace};
pub use optim::{sgd_step, TrainConfig};
pub use param::{Param, Parameterized};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("degenerate step: finite-difference eps must be positive")]
    DegenerateStep,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_len(what: &str, expected: usize, found: usize) -> Result<(), NnError> {
    if expected == found {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch {
            what: what.to_string(),
            expected,
            found,
        })
    }
}
