//! CTC-driven dynamic compression of encoder states for sequence-to-sequence
//! speech models.
//!
//! The crate is organised bottom-up:
//!
//! - [`ctc`]: blank-augmented vocabularies, the collapse rule, log-space
//!   forward-backward loss with exact gradients, and greedy decoding.
//! - [`compress`]: segmentation of encoder states by identical consecutive
//!   CTC predictions and pooling with the Average / Weighted / Softmax policies.
//! - [`autograd`]: a small reverse-mode tape over 2-D arrays, generic over
//!   `f32`/`f64`.
//! - [`model`]: convolutional subsampler, Transformer encoder with a
//!   logarithmic distance penalty and a CTC tap, Transformer decoder, and the
//!   multi-task loss.
//! - [`features`]: log-Mel extraction, speaker normalisation, SpecAugment and
//!   the synthetic task renderer.
//! - [`train`]: learning-rate schedule, Adam, checkpoint averaging, the
//!   training loop and activation-memory accounting.
//! - [`metrics`] and [`cli`]: WER/BLEU and the `ctcc` command line.

pub mod autograd;
pub mod cli;
pub mod compress;
pub mod ctc;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
