//! Tensor storage and tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass; calling
//! [`Graph::backward`] on a scalar result walks the tape in reverse and
//! returns vector-Jacobian products for every node that requires a gradient.
//! Parameters live in a [`ParamStore`] and are copied onto the tape with
//! [`Graph::param`].

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{BatchStats, BnMode, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tensor::{order_free_sum, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate batch: batchnorm needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}
