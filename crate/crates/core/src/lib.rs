//! Noise-robustness certificates for vector-quantized convolutional autoencoders.
// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod lipschitz;
pub mod model_io;
pub mod network;
pub mod nroub;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
