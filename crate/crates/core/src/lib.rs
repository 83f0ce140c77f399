//! Adapter souping laboratory: a small autodiff engine, a decoder-only
//! transformer with bottleneck adapters, training, weight-space averaging,
//! adapter selection and perplexity evaluation.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod scalar;
pub mod selector;
pub mod soup;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used for training and checkpoints.
pub type Tensor32 = tensor::Tensor<f32>;
pub type BaseModel32 = model::BaseModel<f32>;
pub type AdapterWeights32 = model::AdapterWeights<f32>;
pub type Registry32 = trainer::Registry<f32>;

/// Double-precision instantiations for tight gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type BaseModel64 = model::BaseModel<f64>;
