//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Values live on a [`Graph`] tape; every primitive records its inputs and
//! whatever activations its adjoint needs. [`Graph::backward`] sweeps the tape
//! in reverse creation order. Reductions always sum in row-major order, so a
//! given input produces bit-identical outputs on every run.

mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::grad_check;
pub use graph::{Gradients, Graph, NodeId, Var};
pub use kernels::{sigmoid, softplus};
pub use tensor::Tensor;
