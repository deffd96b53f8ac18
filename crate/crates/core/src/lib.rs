//! Two-branch single-image super-resolution: a multi-resolution generator
//! tuned for distortion, a residual generator tuned for perceptual quality,
//! and a soft-thresholding merge of their outputs.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

pub mod arrayfile;
pub mod data;
pub mod fusion;
pub mod graph;
pub mod imgio;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use fusion::{fuse, FusionParams, FusionRule};
pub use imgio::{ColorSpace, ImageTensor, Range};
pub use models::{DiscriminatorConfig, GeneratorConfig, MRGeneratorConfig, WPGeneratorConfig};
pub use params::ParameterSet;
pub use scalar::{DType, Real};
pub use tensor::Tensor;
pub use trainer::{Stage, TrainState};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ImageF32 = ImageTensor<f32>;
pub type ImageF64 = ImageTensor<f64>;
pub type ParamsF32 = ParameterSet<f32>;
pub type ParamsF64 = ParameterSet<f64>;
pub type TrainStateF32 = TrainState<f32>;
pub type TrainStateF64 = TrainState<f64>;
