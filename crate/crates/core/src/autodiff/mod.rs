//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is applied. Calling
//! [`Graph::backward`] on a scalar node sweeps the record in reverse and fills
//! a gradient slot for every node that requires one. [`Graph::detach`] cuts
//! the graph: the detached node keeps its value, but nothing upstream of it
//! receives gradient through that edge.

mod check;
mod graph;
mod tensor;

pub use check::{check_gradients, relative_error, GradientCheck, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, Var, MASK_OFFSET};
pub(crate) use graph::sigmoid;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("node handle refers to a freed or foreign graph")]
    StaleNode,
    #[error("no gradient recorded for this node")]
    NoGradient,
    #[error("softmax row {row} has no unmasked position")]
    EmptyMask { row: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
