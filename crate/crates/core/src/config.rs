//! Architectural configuration for the encoder, the MoE decoder and the
//! multi-scale packing stage, plus validation of all structural invariants
//! before any compute runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {detail}")]
    Invalid { field: &'static str, detail: String },
}

fn invalid(field: &'static str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        detail: detail.into(),
    }
}

pub const PATCH_CHANNELS: usize = 3;
/// Images are padded so both sides are multiples of this.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Transformer depth; 0 collapses the encoder to patch embed + connector.
    pub depth: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub heads: usize,
    pub patch_stride: usize,
    /// Pixel-shuffle reduction factor; each output token merges factor².
    pub shuffle_factor: usize,
    /// Decoder width the connector projects into.
    pub out_width: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_stride * self.patch_stride * PATCH_CHANNELS
    }

    /// Connector input width after pixel shuffle.
    pub fn shuffled_width(&self) -> usize {
        self.width * self.shuffle_factor * self.shuffle_factor
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.width == 0 {
            return Err(invalid("encoder.width", "must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid(
                "encoder.heads",
                format!("width {} not divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.head_dim() % 4 != 0 {
            return Err(invalid(
                "encoder.heads",
                format!("head dim {} must be divisible by 4 for 2-d rotary", self.head_dim()),
            ));
        }
        if self.mlp_width == 0 {
            return Err(invalid("encoder.mlp_width", "must be positive"));
        }
        if self.patch_stride == 0 || PAD_MULTIPLE % self.patch_stride != 0 {
            return Err(invalid(
                "encoder.patch_stride",
                format!("must divide the pad multiple {PAD_MULTIPLE}"),
            ));
        }
        if self.shuffle_factor == 0
            || PAD_MULTIPLE % (self.patch_stride * self.shuffle_factor) != 0
        {
            return Err(invalid(
                "encoder.shuffle_factor",
                format!(
                    "stride {} x factor {} must divide the pad multiple {PAD_MULTIPLE}",
                    self.patch_stride, self.shuffle_factor
                ),
            ));
        }
        if self.out_width == 0 {
            return Err(invalid("encoder.out_width", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub heads: usize,
    pub vocab: usize,
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.width == 0 {
            return Err(invalid("decoder.width", "must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid(
                "decoder.heads",
                format!("width {} not divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid(
                "decoder.heads",
                format!("head dim {} must be even for rotary pairs", self.head_dim()),
            ));
        }
        if self.mlp_width == 0 {
            return Err(invalid("decoder.mlp_width", "must be positive"));
        }
        // Room for the four structural tokens on top of the text range.
        if self.vocab < 8 {
            return Err(invalid("decoder.vocab", "must be at least 8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PackingConfig {
    /// Per-step downsampling rate, in (0, 1).
    pub tau: f64,
    /// Scales below this pixel area are dropped from the pyramid.
    pub area_threshold: u64,
}

impl PackingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid("packing.tau", format!("{} not in (0, 1)", self.tau)));
        }
        Ok(())
    }
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            tau: std::f64::consts::FRAC_1_SQRT_2,
            area_threshold: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub packing: PackingConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.packing.validate()?;
        if self.encoder.out_width != self.decoder.width {
            return Err(invalid(
                "encoder.out_width",
                format!(
                    "connector output {} must match decoder width {}",
                    self.encoder.out_width, self.decoder.width
                ),
            ));
        }
        Ok(())
    }
}
