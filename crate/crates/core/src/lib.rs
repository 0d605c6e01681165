//! Temporal scale transformer for stack-voltage forecasting, with the data
//! pipeline, training loop and RUL metrics around it.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix
//! the scalar for the common cases.

pub mod data;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = model::TSTransformer<f64>;
pub type Model32 = model::TSTransformer<f32>;
