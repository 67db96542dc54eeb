//! Run configuration, loaded from TOML.
//!
//! Every field has a default, so an empty file is the desk-scale config:
//!
//! ```toml
//! seed = 7
//!
//! [encoder]
//! seed = 1234
//! text_dim = 32
//! visual_dim = 32
//! backbone_channels = [16, 32, 64, 128]
//! prompt_size = 64
//! detector_size = 64
//!
//! [model]
//! heads = 4
//! norm = true
//! activation = "relu"
//!
//! [optim]
//! lr = 1e-4
//! batch_size = 4
//! steps = 300
//! flip = true
//! crop = false
//! jitter = false
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub backbone_channels: [usize; 4],
    /// Side of the prompt-branch input.
    pub prompt_size: usize,
    /// Side of the detector-branch input.
    pub detector_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seed: 1234,
            text_dim: 32,
            visual_dim: 32,
            backbone_channels: [16, 32, 64, 128],
            prompt_size: 64,
            detector_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    /// Instance normalization with a learned per-channel scale and shift
    /// inside every 3x3 conv block.
    pub norm: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            norm: true,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            steps: 300,
            flip: true,
            crop: false,
            jitter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds trainable initialization and data shuffling.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |msg: String| Err(Error::Config(msg));
        if e.text_dim == 0 || e.visual_dim == 0 || e.backbone_channels.contains(&0) {
            return bad("all encoder dimensions must be positive".into());
        }
        for (name, side) in [("prompt_size", e.prompt_size), ("detector_size", e.detector_size)] {
            if side == 0 || side % 32 != 0 {
                return bad(format!("{name} = {side} must be a positive multiple of 32"));
            }
        }
        let m = &self.model;
        if m.heads == 0 {
            return bad("heads must be positive".into());
        }
        if !e.visual_dim.is_multiple_of(m.heads) || !e.backbone_channels[3].is_multiple_of(m.heads) {
            return bad(format!(
                "visual_dim {} and backbone_channels[3] {} must be divisible by heads {}",
                e.visual_dim, e.backbone_channels[3], m.heads
            ));
        }
        if e.backbone_channels[..3].iter().any(|c| c % 4 != 0) {
            return bad("backbone_channels[0..3] must be divisible by 4 (channel groups)".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if o.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }
}
