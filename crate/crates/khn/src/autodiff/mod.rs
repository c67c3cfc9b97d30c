//! Minimal reverse-mode automatic differentiation over flat f64 buffers.
//!
//! All real-valued quantities in the pipeline — embeddings, kernel
//! matrices, generated classifier weights, and every trainable parameter —
//! live in [`Tensor`]s. Differentiable ops run through a [`Tape`];
//! [`backward`] replays the tape once in reverse and accumulates into the
//! `grad` buffers of every `requires_grad` tensor reachable from the loss.
//!
//! Everything is f64. Any op that would produce a non-finite value fails
//! with a numeric error instead of propagating NaN/Inf.

mod conv;
mod gradcheck;
pub mod nn;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error, REL_ERROR_FLOOR};
pub use ops::broadcast_shape;
pub use optim::{adam_step, sgd_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use tape::{backward, Tape};
pub use tensor::Tensor;
