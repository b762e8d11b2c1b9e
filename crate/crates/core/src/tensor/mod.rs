//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! Layout is row-major with the `N, C, H, W` convention throughout. There
//! is no broadcasting: binary ops require identical shapes, and scalars
//! enter through [`Graph::scale`] / [`Graph::add_scalar`].

mod array;
pub mod gradcheck;
mod graph;
pub mod linalg;
pub mod ops;
mod scalar;

pub use array::Tensor;
pub use graph::{BackwardOp, Graph, Profile, Var};
pub use scalar::{DType, Scalar};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this graph; re-run the forward pass first")]
    BackwardTwice,
    #[error("tensor dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
