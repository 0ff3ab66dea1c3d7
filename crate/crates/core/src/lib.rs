//! A laboratory for the data-dependent timing channel in max pooling.
//!
//! The crate contains a small CNN inference engine with a branchy and a
//! constant-time max-pool kernel, a trainer with optional DP-SGD, a timing
//! harness with wall-clock and surrogate channels, the median-sign leakage
//! statistics, and profiled label-recovery and membership-inference attacks.

pub mod attack;
pub mod data;
pub mod error;
pub mod leakage;
pub mod nn;
pub mod seeds;
pub mod tensor;
pub mod timing;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::{build_custom_cnn, model_forward, LayerSpec, ModelSpec, PoolVariant};
pub use tensor::{pad2d, Shape, Tensor};
