//! Nested tabular data synthesis with composable autoregressive codecs.
//!
//! A schema of structs, lists, categoricals and numbers compiles into a
//! tree of codecs sharing one parameter store. Training minimizes the
//! chain-rule negative log-likelihood; sampling runs the same chain
//! autoregressively from the root conditioning vector.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the data,
//! training and CLI layers use.

pub mod codec;
pub mod data;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schema;
mod error;
mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Gradients64 = tensor::Gradients<f64>;
pub type CodecTree64 = codec::CodecTree<f64>;
