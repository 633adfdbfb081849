//! Conditioning layers for conditional GANs (concatenation, FiLM, full
//! bilinear and the low-rank bilinear residual layer), a rank certificate
//! for the FiLM-as-bilinear construction, and a small attribute-editing
//! GAN trained with least-squares adversarial losses.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
