//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod adam;
mod array;
pub mod nn;
mod ops;
mod tape;

pub use adam::Adam;
pub use array::NdArray;
pub use nn::{Binder, LayerNorm, Linear, Mlp, ParamStore, SelfAttention};
pub use tape::{Gradients, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}
