//! Channel gating networks.
//!
//! A gated convolution splits its input channels into a base part, always
//! convolved, and a conditional part, convolved only at output positions
//! where a learned threshold on the base partial sum says the output is
//! likely to matter. The crate contains a small CNN engine, the gated block
//! with its training graph and losses, cost accounting, and an analytical
//! systolic-array model.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gating;
pub mod model;
pub mod nn;
pub mod perf;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{CgError, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type CgBlock32 = gating::CgBlock<f32>;
pub type CgBlock64 = gating::CgBlock<f64>;
