//! Convolution-free transformer image captioning.
//!
//! An image is resized, cut into `P×P` patches and embedded as a token
//! sequence; a post-norm transformer encoder turns the sequence into a
//! memory that a causal transformer decoder attends to while predicting
//! caption words. Everything runs on the small tensor/autodiff kernel in
//! [`tensor`].

pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
