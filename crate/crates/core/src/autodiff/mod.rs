//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and enough context for its backward rule. [`Graph::backward`] walks the
//! tape once in reverse order and accumulates gradients for every node that
//! depends on a trainable leaf.

mod adamw;
mod gradcheck;
mod graph;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{gradcheck, GradCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("variable does not belong to this graph")]
    Detached,
}
