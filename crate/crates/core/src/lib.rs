//! Numerical laboratory for prompt-induced hidden-state shifts.
//!
//! The crate models a language-model head as a softmax over unembedded
//! hidden states and builds a handful of exactly checkable experiments on
//! top of it:
//!
//! - [`lm`]: the toy LM head (embeddings, unembeddings, next-token softmax,
//!   class masses).
//! - [`attention`]: a single self-attention head, the split of its output
//!   into a prompt part and a context part weighted by a scalar `alpha`, and
//!   a soft-prompt construction that steers the head output to any target.
//! - [`concept`]: binary concepts and their linear representation vectors.
//! - [`correction`]: linear self-correction trajectories, the closed-form
//!   class probability and the concentration threshold.
//! - [`trace`]: analysis of hidden-state traces captured from a real model
//!   (shift extraction, group inner-product sums, 3-component PCA).
//!
//! All arithmetic is `f64`. Every public operation is a pure function of its
//! inputs.

pub mod attention;
pub mod concept;
pub mod correction;
pub mod error;
pub mod lm;
pub mod numeric;
pub mod trace;

pub use error::{Error, Result};

/// File-format version understood by every loader in this crate.
pub const FORMAT_VERSION: u32 = 1;
