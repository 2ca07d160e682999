//! Structured-dropout Monte-Carlo uncertainty estimation for a miniature
//! pre-activation ResNet, with calibration metrics, ensemble-diversity
//! decompositions and a Bayesian active-learning loop.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod active;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod diversity;
pub mod dropout;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod nn;
pub mod resnet;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type ResNet32 = resnet::ResNet<f32>;
pub type ResNet64 = resnet::ResNet<f64>;
