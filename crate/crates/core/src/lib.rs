//! Similarity embedding networks for human activity recognition.
//!
//! Two-sensor motion windows are turned into frequency-domain tensors, encoded
//! by a hierarchical convolution + LSTM network trained with a pairwise cosine
//! similarity loss, and classified by matching against class centers. The same
//! embedding statistics drive a label-denoising filter.

pub mod classifiers;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod pairwise;
pub mod seeding;
pub mod signal;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
