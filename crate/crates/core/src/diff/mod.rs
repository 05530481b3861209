//! Dense `f64` tensors, a reverse-mode tape, Adam and binary checkpoints.
//!
//! Every model in the crate is written against [`Graph`]: bind a
//! [`ParameterStore`] onto a fresh graph, run the forward ops, call
//! [`Graph::backward_into`] and then [`ParameterStore::adam_step`].
//! Gradients accumulate across backward calls until the optimizer step
//! (or [`ParameterStore::zero_grad`]) clears them.

mod graph;
pub mod nn;
mod store;
mod tensor;

pub use graph::{Graph, Var};
pub use store::{AdamConfig, Bound, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter store is frozen")]
    Frozen,
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
