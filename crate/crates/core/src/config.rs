//! Run configuration: model widths, loss and optimizer settings.
//!
//! Stored as a flat TOML table. Every key has a default, unknown keys are
//! rejected, and the digest of the canonical serialization travels with
//! checkpoints and reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pointcloud::{Pooling, SuperpointMethod};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuperpointMode {
    #[default]
    Grid,
    Graph,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Avg,
    Max,
}

/// How the coarse location mask enters the fine decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Sigmoid probabilities, differentiable.
    #[default]
    Probability,
    /// Probabilities thresholded at 0.5; no gradient reaches the location decoder.
    Hard,
}

/// Whether the region radius is in meters or a multiple of the object's
/// circumradius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    #[default]
    Absolute,
    Relative,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectCenter {
    #[default]
    Centroid,
    /// Center of the axis-aligned bounding box.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // scene reduction
    pub voxel_size: f64,
    pub superpoint_mode: SuperpointMode,
    pub superpoint_cell: f64,
    pub superpoint_k: usize,
    pub superpoint_scale: f64,
    pub pooling: PoolingMode,
    // encoder
    pub channels: usize,
    pub encoder_hidden: usize,
    pub freeze_encoder: bool,
    // interactor; the original system runs this width at 1408
    pub queries: usize,
    pub interactor_blocks: usize,
    pub interactor_heads: usize,
    // language model
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_mlp_hidden: usize,
    pub max_positions: usize,
    pub max_answer_len: usize,
    pub freeze_lm_core: bool,
    pub shared_projection: bool,
    // mask decoder
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_hidden: usize,
    pub loc_hidden: usize,
    pub prior_mode: PriorMode,
    pub mask_threshold: f64,
    // losses
    pub include_loc: bool,
    pub tau: f64,
    pub tau_mode: TauMode,
    pub object_center: ObjectCenter,
    pub dice_smooth: f64,
    // optimization
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            superpoint_mode: SuperpointMode::Grid,
            superpoint_cell: 0.25,
            superpoint_k: 8,
            superpoint_scale: 0.5,
            pooling: PoolingMode::Avg,
            channels: 32,
            encoder_hidden: 32,
            freeze_encoder: false,
            queries: 8,
            interactor_blocks: 2,
            interactor_heads: 2,
            d_lm: 64,
            lm_layers: 2,
            lm_heads: 2,
            lm_mlp_hidden: 128,
            max_positions: 96,
            max_answer_len: 16,
            freeze_lm_core: false,
            shared_projection: true,
            decoder_layers: 6,
            decoder_heads: 2,
            decoder_mlp_hidden: 64,
            loc_hidden: 32,
            prior_mode: PriorMode::Probability,
            mask_threshold: 0.5,
            include_loc: true,
            tau: 1.5,
            tau_mode: TauMode::Absolute,
            object_center: ObjectCenter::Centroid,
            dice_smooth: 1.0,
            batch_size: 16,
            total_steps: 1500,
            warmup_steps: 150,
            lr_start: 1e-8,
            lr_peak: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("a flat struct of scalars always serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().take(8).fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").expect("writing to a String cannot fail");
            s
        })
    }

    pub fn superpoint_method(&self) -> SuperpointMethod {
        match self.superpoint_mode {
            SuperpointMode::Grid => SuperpointMethod::Grid {
                cell: self.superpoint_cell,
            },
            SuperpointMode::Graph => SuperpointMethod::Graph {
                k: self.superpoint_k,
                scale: self.superpoint_scale,
            },
        }
    }

    pub fn pooling_mode(&self) -> Pooling {
        match self.pooling {
            PoolingMode::Avg => Pooling::Avg,
            PoolingMode::Max => Pooling::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("voxel_size", self.voxel_size),
            ("superpoint_cell", self.superpoint_cell),
            ("superpoint_scale", self.superpoint_scale),
            ("tau", self.tau),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("channels", self.channels),
            ("encoder_hidden", self.encoder_hidden),
            ("queries", self.queries),
            ("interactor_heads", self.interactor_heads),
            ("d_lm", self.d_lm),
            ("lm_heads", self.lm_heads),
            ("lm_mlp_hidden", self.lm_mlp_hidden),
            ("max_positions", self.max_positions),
            ("decoder_layers", self.decoder_layers),
            ("decoder_heads", self.decoder_heads),
            ("decoder_mlp_hidden", self.decoder_mlp_hidden),
            ("loc_hidden", self.loc_hidden),
            ("batch_size", self.batch_size),
            ("superpoint_k", self.superpoint_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.channels < 4 {
            return fail(format!("channels must be at least 4, got {}", self.channels));
        }
        for (name, width, heads) in [
            ("d_lm", self.d_lm, self.lm_heads),
            ("d_lm", self.d_lm, self.interactor_heads),
            ("channels", self.channels, self.decoder_heads),
        ] {
            if width % heads != 0 {
                return fail(format!("{name}={width} is not divisible by {heads} heads"));
            }
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0 <= self.lr_start && self.lr_start <= self.lr_peak && self.lr_peak.is_finite()) {
            return fail("need 0 <= lr_start <= lr_peak".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return fail("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return fail(format!("mask_threshold must lie in [0, 1], got {}", self.mask_threshold));
        }
        Ok(())
    }
}
