//! Deterministic dense-tensor numerics with reverse-mode differentiation.
//!
//! Everything the encoder, the attention scorer and the training
//! objectives need: a [`Tensor`] type generic over `f32`/`f64`, a recording
//! [`Tape`] with a fixed primitive set, named-input graph evaluation with
//! finite-difference checking, and a seeded [`RngStream`].
//!
//! Kernels run single-threaded; results are bit-identical across runs for
//! identical inputs.

mod error;
pub mod gradcheck;
pub mod graph;
mod real;
mod rng;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use graph::{evaluate, finite_diff_check, relative_error, Bindings, Evaluation, GradientSet, Inputs};
pub use real::Real;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Logistic sigmoid evaluated without overflow.
pub fn sigmoid<T: Real>(x: T) -> T {
    tape::sigmoid(x)
}

/// In-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    tape::softmax_row(row)
}
