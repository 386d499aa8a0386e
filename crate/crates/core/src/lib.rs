//! Momentum-contrast pretraining with mix-up semi-positives, on dense `f64`
//! tensors with handwritten gradients.
//!
//! - [`numerics`]: tensors, softmax-family losses, normalization, gradient checks, RNG
//! - [`encoder`]: MLP encoder, backward pass, SGD, checkpoints
//! - [`contrastive`]: InfoNCE, in-batch variant, mix-up and its soft-target loss
//! - [`moco`]: momentum key encoder and negative queue
//! - [`data`]: synthetic clusters, augmentation, batching, dataset files
//! - [`training`]: pretraining loop, linear probe, cluster indices, exports

pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod moco;
pub mod numerics;
mod textio;
pub mod training;

pub use error::{MixcoError, Result};
