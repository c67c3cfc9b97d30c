//! Kernel-conditioned hypernetworks for few-shot classification.
//!
//! Given an N-way K-shot support set, the model encodes every support
//! example, computes a kernel matrix over the (optionally class-averaged)
//! embeddings, and feeds the flattened matrix to a hypernetwork that emits
//! the weights of a small task-specific classifier. Queries are classified
//! by their vector of kernel values against the same support rows, so the
//! classifier only ever sees relations between embeddings, never raw
//! features.
//!
//! Modules follow the pipeline:
//!
//! - [`autodiff`] — tape-based reverse-mode AD over flat f64 tensors, with
//!   Adam and a finite-difference oracle.
//! - [`episodes`] — N-way K-shot episode construction from a synthetic
//!   Gaussian-cluster generator or an on-disk PNG image-folder layout.
//! - [`encoder`] — embedding backbones: a small MLP and a four-block
//!   conv/batch-norm/ReLU/max-pool stack.
//! - [`kernel`] — support ordering, aggregation, dot and cosine kernels,
//!   the support kernel matrix and per-query kernel vectors.
//! - [`hypernet`] — neck + per-parameter heads generating the target
//!   classifier's weights, and the full episode forward pass.
//! - [`training`] — the episodic training loop, prediction with optional
//!   support-set finetuning, and evaluation reports.
//! - [`cli`] — run configs, checkpoints, metrics files, and the command
//!   entry points used by the `khn` binary.

// negated float comparisons (`!(x > 0.0)`) are deliberate: they reject
// NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod episodes;
pub mod hypernet;
pub mod kernel;
pub mod rng;
pub mod training;

mod error;

pub use error::{Error, Result};
