//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only arena of nodes; creation order is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.

mod graph;
mod mlp;
mod tensor;

pub use graph::{AutodiffError, Gradients, Graph, NodeId, Primitive, L2_NORMALIZE_EPS};
pub use mlp::{init_layers, insert_layers, mlp_forward, LinearLayer};
pub use tensor::{Tensor, TensorError};
