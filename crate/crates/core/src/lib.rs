//! U-Mamba2 volumetric segmentation at desk scale.
//!
//! The crate is layered bottom-up: [`tensor`] (arrays and reverse-mode
//! differentiation), [`ssd`] and [`mamba`] (the state-space mixer), [`nn`]
//! (parameters and layers), [`network`] (the encoder/bottleneck/decoder),
//! [`prompts`] (interactive clicks), [`training`], [`inference`],
//! [`postprocess`] and [`metrics`], with [`volume`], [`schema`] and
//! [`phantom`] providing data.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod mamba;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod postprocess;
pub mod prompts;
pub mod schema;
pub mod selftest;
pub mod ssd;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
