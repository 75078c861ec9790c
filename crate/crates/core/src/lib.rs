//! Group dance motion generation with a spatial-temporal diffusion denoiser.
//!
//! All numerics are `f64` with fixed loop orders, so every result is
//! bit-reproducible for a given seed on one machine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod binio;
pub mod checkpoint;
pub mod cli;
pub mod counter;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod param;
pub mod reference;
pub mod tensor;
pub mod train;
pub mod validate;

pub use error::{Error, Result};
pub use model::{Denoise, Denoiser, DenoiserConfig};
pub use tensor::Tensor;
