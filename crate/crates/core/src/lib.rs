//! Multi-scale hierarchical video prediction.

pub mod autograd;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type MsPred32 = model::MsPred<f32>;
pub type MsPred64 = model::MsPred<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Batch32 = training::Batch<f32>;
pub type Batch64 = training::Batch<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
