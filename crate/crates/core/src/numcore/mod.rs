//! Numeric substrate: dense 2-D tensors, a reverse-mode tape, a gated
//! recurrent (LSTM) cell, Adam, and finite-difference gradient checking.
//!
//! Everything here is generic over the scalar type through [`Scalar`]
//! (`f32`, `f64`, ...). The pipeline above instantiates it at `f64` via the
//! aliases at the crate root.
//!
//! Matrices are row-major and at most 2-D; a vector is a `1 x n` matrix.
//! Inner accumulations always run in ascending index order, so a row of a
//! batched result is bit-identical to the same row computed alone.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod lstm;
pub mod rng;
mod scalar;
pub mod tape;
pub mod tensor;


pub use adam::{clip_global_norm, grads_for, Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::LstmParams;
pub use rng::{stream, stream_key};
pub use scalar::{fromf64, tof64, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
