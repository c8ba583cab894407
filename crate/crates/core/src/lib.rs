//! Layer-wise energy-separation adversarial detection for edge devices.
//!
//! A tiny convolutional detector is trained so that the mean magnitude of
//! each layer's pre-activation outputs (its "energy") sits near a low target
//! for natural inputs and a high target for adversarial ones. At inference
//! the detector exits at the first layer whose energy falls outside a
//! percentile band calibrated on natural samples. An analytic accelerator
//! model charges the executed work in picojoules.

pub mod attacks;
pub mod calibration;
pub mod classifier;
pub mod data;
pub mod detector;
pub mod early_exit;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod numerics;
pub mod provenance;
pub mod qes;
pub mod quant;
pub mod synth;

pub use error::{Error, Result};
