//! MLP-Mixer classification of smartwatch IMU windows, plus the surrounding
//! pipeline: segment ingestion and length normalization, AdamW training with
//! a step-decay schedule, both fold-based evaluation protocols, and a
//! streaming mask-wearing reminder engine.
//!
//! The numeric core ([`tensor`], [`tape`], [`layers`], [`model`], [`optim`])
//! is generic over the scalar type; the shipped pipeline runs in `f64` via
//! the aliases below.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod stream;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default 64-bit instantiations used by the CLI and evaluation pipeline.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type MixerModel64 = model::MixerModel<f64>;

/// 32-bit twins for experiments.
pub type Tensor32 = tensor::Tensor<f32>;
pub type MixerModel32 = model::MixerModel<f32>;
