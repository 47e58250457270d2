//! Run configuration: one JSON document covering model dimensions, the
//! preprocessing targets, optimizer hyperparameters, and decoding. Defaults
//! encode the published training setup (Adam 0.9/0.99, visual extractor at
//! 5e-5 vs 1e-4 elsewhere, StepLR gamma 0.1, batch size 1, 300-token cap)
//! with desk-scale model dimensions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::generate::DecodeMode;
use crate::model::vision::PatchConfig;
use crate::model::ModelDims;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("config is malformed: {message}")]
    Malformed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub l_vision: usize,
    pub heads_vision: usize,
    pub l_encoder: usize,
    pub l_decoder: usize,
    pub heads_text: usize,
    pub mlp_ratio: usize,
    pub memory_slots: usize,
    pub rm_gated: bool,
    /// (temporal, height, width) patch sizes.
    pub patch: [usize; 3],
    /// Model input slab after preprocessing (depth, height, width).
    pub volume_shape: [usize; 3],
    /// Resample target spacing in mm (z, y, x).
    pub target_spacing: [f64; 3],
    pub vocab_min_count: usize,
    pub max_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr_visual: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_lr_gamma: f64,
    /// Decay interval in epochs; absent disables the scheduler (desk default).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_lr_every_epochs: Option<u64>,
    pub epochs: u64,
    /// Hard cap on optimizer steps, for short runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub decode: DecodeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelSection {
                d_model: 64,
                l_vision: 2,
                heads_vision: 4,
                l_encoder: 2,
                l_decoder: 2,
                heads_text: 2,
                mlp_ratio: 4,
                memory_slots: 3,
                rm_gated: true,
                patch: [6, 12, 12],
                volume_shape: [24, 48, 48],
                target_spacing: [1.5, 0.75, 0.75],
                vocab_min_count: 1,
                max_tokens: 300,
            },
            optim: OptimSection {
                lr_visual: 5e-5,
                lr_other: 1e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                step_lr_gamma: 0.1,
                step_lr_every_epochs: None,
                epochs: 20,
                max_steps: None,
                checkpoint_every_steps: None,
            },
            decode: DecodeMode::Greedy,
        }
    }
}

impl RunConfig {
    /// Paper-scale dimensions: 240x480x480 volumes, (12)x24x24 patches,
    /// D=512. Too heavy to train at a desk; used for shape contracts.
    pub fn full_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 512;
        cfg.model.heads_vision = 8;
        cfg.model.heads_text = 8;
        cfg.model.l_decoder = 3;
        cfg.model.l_encoder = 3;
        cfg.model.patch = [12, 24, 24];
        cfg.model.volume_shape = [240, 480, 480];
        cfg.model.vocab_min_count = 3;
        cfg
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            p_t: self.model.patch[0],
            p1: self.model.patch[1],
            p2: self.model.patch[2],
        }
    }

    pub fn volume_shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.model.volume_shape;
        (d, h, w)
    }

    pub fn target_spacing(&self) -> (f64, f64, f64) {
        let [z, y, x] = self.model.target_spacing;
        (z, y, x)
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            d_model: self.model.d_model,
            l_vision: self.model.l_vision,
            heads_vision: self.model.heads_vision,
            l_encoder: self.model.l_encoder,
            l_decoder: self.model.l_decoder,
            heads_text: self.model.heads_text,
            mlp_ratio: self.model.mlp_ratio,
            memory_slots: self.model.memory_slots,
            rm_gated: self.model.rm_gated,
            vocab_size,
            max_tokens: self.model.max_tokens,
            eps: 1e-5,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(json).map_err(|e| ConfigError::Malformed {
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}
