//! Capsule-network sequence routing for CTC acoustic modeling.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a tape for reverse-mode differentiation
//! - [`capsulation`]: convolutional front-end producing primary capsules
//! - [`routing`]: windowed capsule layers with dynamic and sequential routing
//! - [`model`]: the full network and its parameter store
//! - [`ctc`]: CTC loss, brute-force oracle and decoders
//! - [`metrics`]: error rates and coupling-coefficient export
//! - [`trainer`]: initialization, Adam, schedules, batching and checkpoints
//! - [`data`]: feature files, normalization and the synthetic corpus
//! - [`exec`]: parallel or sequential evaluation over utterances

pub mod capsulation;
pub mod ctc;
pub mod data;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
