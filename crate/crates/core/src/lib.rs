//! Attention-based image captioning on a from-scratch autodiff core.
//!
//! An encoder projects a precomputed CNN feature grid, a GRU decoder with
//! additive attention emits one word per step, and the usual caption metrics
//! score the output.

pub mod attention;
pub mod captioner;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
