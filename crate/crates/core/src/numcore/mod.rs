//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Graphs are built first and evaluated with [`Graph::forward`]; gradients
//! come from [`Graph::backward`]. Ops work on whole matrices so that a layer
//! over every edge of a graph is a handful of nodes, not one node per edge.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, NodeId, SKIP};
pub use tensor::Tensor;

use thiserror::Error;

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("`{op}` (node {node}) got out-of-domain input {value}")]
    Domain {
        op: &'static str,
        node: usize,
        value: f64,
    },
    #[error("backward called on node {0} before forward")]
    BackwardBeforeForward(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("bad shape: {0}")]
    BadShape(String),
}
