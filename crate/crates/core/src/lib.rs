//! Zero-shot speaker conditioning for non-autoregressive text-to-speech.
//!
//! Speaker embeddings are computed from the per-layer outputs of a frozen
//! self-supervised-style speech encoder through a learnable layer weighted-sum
//! and an aggregator. The acoustic model can be conditioned with one shared
//! embedding or with separate embeddings for the duration predictor and the
//! spectrogram path, which allows rhythm transfer between speakers.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
