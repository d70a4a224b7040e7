//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated; a single
//! reverse sweep from a scalar loss fills the gradient slot of every node that
//! depends on a variable. Everything is single threaded and deterministic: the
//! same inputs produce bit-identical values and gradients on every run.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttnSegment, Graph, NodeId, LAYER_NORM_EPS, MASK_NEG};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("{0}: reduction over zero valid positions")]
    EmptyReduction(&'static str),
    #[error("{0}")]
    Invalid(String),
}
