//! Decoder-only Transformer summarization with controllable verbatim copying.
//!
//! Source and summary are encoded as one sequence under a prefix attention
//! mask. Which summary tokens enter the training loss (those seen in the
//! source, unseen ones, and source tokens) steers how much the model copies;
//! best-first or beam search plus copy-aware reranking steer it further at
//! decoding time.

pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
