//! Two-stage structured pruning for a small decoder-only transformer.
//!
//! Stage one removes whole FFN intermediate neurons, ranked by the norm of
//! their gated activations on calibration data. Stage two greedily removes
//! the attention submodules whose absence costs the least calibration
//! perplexity. [`budget`] decides how a global sparsity target is split
//! between the two.

pub mod budget;
pub mod checkpoint;
pub mod corpus;
pub mod depth;
pub mod error;
pub mod exec;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod width;

pub use error::{Error, Result};
pub use exec::Exec;
