//! Question-conditioned video-text alignment at desk scale.
//!
//! - [`tensor`]: dense `f64` tensors with a single-use reverse-mode tape.
//! - [`sampler`]: uniform plus query-similarity frame selection.
//! - [`perceiver`]: latent cross-attention resampler over frame features.
//! - [`vqformer`]: gated cross-attention from video tokens to question tokens.
//! - [`model`]: the end-to-end toy pipeline, loss and SGD training.
//! - [`cli`]: command implementations behind the `vaquita` binary.

pub mod cli;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod perceiver;
pub mod sampler;
pub mod tensor;
pub mod vqformer;
pub mod vqta;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
