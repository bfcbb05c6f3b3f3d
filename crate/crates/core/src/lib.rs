//! Cross-view (exocentric to egocentric) video synthesis.
//!
//! A shared encoder-decoder generator is unrolled along four schedules
//! (temporal and spatial, each downstream and upstream), the four candidate
//! sequences are merged by a learned per-pixel softmax attention, and the
//! result is trained against a spatial (frame-pair) and a temporal
//! (anchor-plus-sequence) patch discriminator.

pub mod autograd;
pub mod branches;
pub mod error;
pub mod frames;
pub mod fusion;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod trainkit;

pub use error::{CheckpointError, Error, Result};
