//! Masked-autoencoder pretraining and fine-tuning for complex baseband IQ
//! signals.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient verification); the aliases below name the common
//! instantiations.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod masker;
pub mod metrics;
pub mod net;
pub mod packer;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Waveform at storage precision.
pub type Waveform = synth::IqWaveform<f32>;
/// Waveform at analysis precision.
pub type Waveform64 = synth::IqWaveform<f64>;
/// Tensor at training precision.
pub type Tensor32 = net::Tensor<f32>;
/// Tensor at gradient-check precision.
pub type Tensor64 = net::Tensor<f64>;
pub type ParamStore32 = net::ParamStore<f32>;
pub type ParamStore64 = net::ParamStore<f64>;
