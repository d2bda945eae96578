//! Class-incremental continual text classification with fast-slow and
//! current-past contrastive learning, K-means exemplar memory, adversarial
//! memory augmentation and a neural mutual-information probe.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! experiment runner and the aliases below fix it to `f64`.

pub mod adversarial;
pub mod autodiff;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod memory;
pub mod mine;
pub mod model;
pub mod optim;
pub mod records;
pub mod runner;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Encoder64 = model::Encoder<f64>;
pub type Model64 = model::Model<f64>;
pub type Encoder32 = model::Encoder<f32>;
pub type Model32 = model::Model<f32>;
