//! REGEN: distill a slow image-enhancement teacher into a fast paired
//! student network, and measure the quality/speed trade-off.
//!
//! The pipeline runs in four phases: patch matching between source and
//! target domains ([`patch`]), teacher enhancement into paired data
//! ([`teacher`], [`data`]), student training ([`student`]), and evaluation
//! with FID/KID ([`metrics`]), ONNX export ([`export`]) and latency
//! benchmarks ([`bench`]). Numeric code is generic over [`scalar::Scalar`]
//! (`f32` or `f64`).

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
mod fsio;
pub mod features;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod onnx;
pub mod patch;
pub mod runtime;
pub mod scalar;
pub mod student;
pub mod synth;
pub mod teacher;
pub mod tensor;

/// Single-precision aliases used by the command-line driver and benchmarks.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Student32 = student::StudentModel<f32>;
pub type FeatureMatrix32 = metrics::FeatureMatrix<f32>;
pub type PatchRecord32 = patch::PatchRecord<f32>;

/// Double-precision aliases used by gradient checks and metric oracles.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Student64 = student::StudentModel<f64>;
pub type FeatureMatrix64 = metrics::FeatureMatrix<f64>;
pub type PatchRecord64 = patch::PatchRecord<f64>;
