//! Desk-scale native multimodal transformer lab.
//!
//! A from-scratch f64 implementation of a vision encoder feeding a
//! modality-routed MoE decoder, with multi-scale image packing, a
//! tape-based reverse-mode autodiff kernel verified by finite differences,
//! a staged training loop, and a scaling-experiment harness.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod fdiff;
pub mod imagefile;
pub mod layers;
pub mod model;
pub mod packing;
pub mod params;
pub mod rope;
pub mod scaling;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "testkit"))]
pub mod oracle;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig, PackingConfig};
pub use params::{ParamGroup, ParameterStore};
pub use seed::SeedSplitter;
pub use tape::{NodeId, Tape};
pub use tensor::{Tensor, TensorError};
