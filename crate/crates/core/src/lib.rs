//! Conditionally parameterized convolutions.
//!
//! Tensors and a tape autodiff engine, CondConv layers with pluggable routers,
//! a MobileNetV1 builder with its multiply-add cost model, a small training
//! harness and routing-weight analysis. Everything is generic over
//! [`Scalar`] (`f32` or `f64`).

pub mod analysis;
pub mod autodiff;
pub mod condconv;
pub mod cost;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod ops;
pub mod routing;
pub mod scalar;
pub mod spec;
pub mod svg;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Dataset32 = train::Dataset<f32>;
pub type Dataset64 = train::Dataset<f64>;
