//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records operations on values copied from a [`ParamStore`];
//! [`Graph::backward`] returns [`Gradients`] keyed by parameter id. All
//! kernels are single-threaded and deterministic.

pub mod check;
mod error;
mod graph;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use graph::{patchify, unpatchify, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
