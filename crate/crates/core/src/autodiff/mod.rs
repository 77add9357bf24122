//! Dense `f64` tensors, a reverse-mode tape, AdamW, and parameter checkpoints.

pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use loss::{binary_focal_loss, FocalParams};
pub use nn::{mlp2, LayerNorm, Linear, Mlp2};
pub use optim::{AdamW, AdamWConfig};
pub use params::{CheckpointError, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of bounds {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
