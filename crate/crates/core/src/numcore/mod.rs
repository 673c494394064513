//! Dense tensors with reverse-mode gradients for the operations the pose
//! model needs, plus a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, GRAD_CHECK_EPS, MAX_CHECKED_COORDS};
pub use graph::{masked_softmax_row, BackwardFault, Graph, Var, LAYER_NORM_EPS, MASK_BIAS};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::{gemm, Layout, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("every position of a softmax row is masked")]
    DegenerateRow,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
    #[error("unknown parameter '{0}'")]
    MissingParameter(String),
    #[error("gradient check aborted: {0}")]
    GradCheck(String),
}

impl NumError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Dimension { op, detail: detail.into() }
    }
}
