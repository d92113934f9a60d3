//! Desk-scale autoregressive text-to-image lab with global visual alignment.
//!
//! The crate covers the whole training stack: a small reverse-mode tensor
//! library, a synthetic shape-world corpus, text and VQ image tokenizers,
//! frozen foundation encoders, a decoder-only transformer, the alignment
//! objective, training, sampling and evaluation metrics.

pub mod numerics;
pub mod nn;
pub mod corpus;
pub mod image;
pub mod tokenizers;
pub mod foundation;
pub mod armodel;
pub mod alignment;
pub mod sampler;
pub mod metrics;
pub mod trainer;
