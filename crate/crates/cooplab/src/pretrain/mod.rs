//! The pretraining core: pillar featurization, the BEV encoder, the
//! one-convolution reconstruction decoder, the Chamfer objective, and
//! the label-free training loop with its ego-only ablation mode.

mod model;
mod train;

pub use model::{decode_recon, pillarize, recon_loss, Decoder, Encoder, Pillars, PILLAR_FEATURES};
pub use train::{pretrain, write_curve_csv, CurvePoint, PretrainOutput, SensorFrame};

use serde::{Deserialize, Serialize};

/// Shape of the pillar encoder. The BEV feature map it produces always
/// matches the masking grid resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub max_points_per_pillar: usize,
    pub pillar_feature_dim: usize,
    pub bev_channels: usize,
    pub conv_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { max_points_per_pillar: 16, pillar_feature_dim: 32, bev_channels: 32, conv_blocks: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), crate::nn::NnError> {
        if self.max_points_per_pillar == 0
            || self.pillar_feature_dim == 0
            || self.bev_channels == 0
            || self.conv_blocks == 0
        {
            return Err(crate::nn::NnError::InvalidArgument {
                op: "encoder_config",
                detail: "all encoder dimensions must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Fraction of non-empty BEV grids hidden from the encoder.
    pub mask_ratio: f64,
    /// Fixed number of points the decoder emits per masked grid.
    pub k_points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Reconstruct only the ego agent's points (ablation mode).
    pub ego_only: bool,
    /// Per-grid cap on loss targets; raw targets stay complete.
    pub target_cap: usize,
    /// Target z normalization.
    pub z_center: f64,
    pub z_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.7,
            k_points: 20,
            epochs: 15,
            batch_size: 4,
            base_lr: 2e-3,
            weight_decay: 1e-2,
            seed: 0,
            ego_only: false,
            target_cap: 256,
            z_center: 0.0,
            z_scale: 4.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), crate::nn::NnError> {
        let ok = self.mask_ratio > 0.0
            && self.mask_ratio < 1.0
            && self.k_points >= 1
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.base_lr > 0.0
            && self.weight_decay >= 0.0
            && self.target_cap >= 1
            && self.z_scale > 0.0;
        if !ok {
            return Err(crate::nn::NnError::InvalidArgument {
                op: "pretrain_config",
                detail: "hyperparameters out of range".into(),
            });
        }
        Ok(())
    }
}
