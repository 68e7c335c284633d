//! Finetuning and measurement: the intermediate-fusion detection model,
//! rotated-IoU AP metrics with range buckets, and the experiment
//! harnesses.

mod finetune;
pub mod harness;
mod metrics;
mod model;

pub use finetune::{
    evaluate_model, finetune, label_subset, model_from_checkpoint, EvalSample, FinetuneOutput,
    MetricsReport,
};
pub use metrics::{compute_ap, nms, range_bucketed_ap, rotated_iou};
pub use model::{decode_detections, Detection, DetectionModel, HeadOutput};

pub use crate::geometry::Box3D;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate zero-area box")]
    DegenerateBox,
    #[error("threshold {0} out of range (0, 1)")]
    BadThreshold(f64),
    #[error("attention inputs disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint has role {found:?}, expected {expected:?}")]
    WrongRole { found: crate::nn::CheckpointRole, expected: crate::nn::CheckpointRole },
}

/// How the finetuned encoder starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Scratch,
    FromCheckpoint,
}

/// Finetuning hyperparameters. The optimization schedule is shared by
/// scratch and pretrained runs so comparisons isolate the
/// initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of the training frames whose labels are used.
    pub label_fraction: f64,
    #[serde(skip)]
    pub init: InitMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 4,
            base_lr: 1e-2,
            weight_decay: 1e-2,
            seed: 0,
            label_fraction: 1.0,
            init: InitMode::Scratch,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "label_fraction {} must be in (0, 1]",
                self.label_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.base_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(EvalError::InvalidConfig("bad finetune hyperparameters".into()));
        }
        Ok(())
    }
}

/// Detection head and metric knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Objectness score needed to emit a box.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Weight of the regression loss against the objectness loss.
    pub lambda_reg: f64,
    /// Negatives sampled per positive cell.
    pub negative_ratio: usize,
    /// The head regresses BEV pose only; z and height come from class
    /// priors (ego sensor frame).
    pub box_z_prior: f64,
    pub box_height_prior: f64,
    /// Anchor-style size priors; the regression bias starts at their
    /// logs.
    pub box_length_prior: f64,
    pub box_width_prior: f64,
    pub iou_thresholds: Vec<f64>,
    /// Right-open range buckets over ego BEV distance, meters.
    pub range_buckets: Vec<(f64, f64)>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.2,
            nms_iou: 0.2,
            lambda_reg: 2.0,
            negative_ratio: 4,
            box_z_prior: -1.0,
            box_height_prior: 1.6,
            box_length_prior: 4.5,
            box_width_prior: 1.9,
            iou_thresholds: vec![0.5, 0.7],
            range_buckets: vec![(0.0, 30.0), (30.0, 50.0), (50.0, 100.0)],
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(EvalError::BadThreshold(self.score_threshold));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(EvalError::BadThreshold(self.nms_iou));
        }
        if self.iou_thresholds.is_empty() || self.range_buckets.is_empty() {
            return Err(EvalError::InvalidConfig("need at least one IoU threshold and bucket".into()));
        }
        for &(lo, hi) in &self.range_buckets {
            if lo >= hi || lo < 0.0 {
                return Err(EvalError::InvalidConfig(format!("bad bucket [{lo}, {hi})")));
            }
        }
        if self.box_length_prior <= 0.0 || self.box_width_prior <= 0.0 || self.box_height_prior <= 0.0 {
            return Err(EvalError::InvalidConfig("size priors must be > 0".into()));
        }
        Ok(())
    }
}
