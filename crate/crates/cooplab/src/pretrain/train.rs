//! The label-free pretraining loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bev::{build_occupancy, normalize_targets, sample_mask, split_cloud, BevSpec};
use crate::fusion::{augment_fused, crop_range, early_fuse_parts, CropBounds};
use crate::geometry::{AugmentRanges, PointCloud, Pose};
use crate::nn::{
    adamw_step, backward, cosine_lr, AdamConfig, Bindings, Checkpoint, CheckpointMeta, CheckpointRole,
    NnError, ParamSet, Tensor,
};
use crate::seed::rng_for;
use crate::sim::Frame;
use crate::Error;

use super::{decode_recon, pillarize, recon_loss, Decoder, Encoder, EncoderConfig, PretrainConfig};

/// The unlabeled view of a frame. Pretraining consumes only this type,
/// so the loop cannot read ground-truth boxes even by accident.
#[derive(Debug, Clone)]
pub struct SensorFrame {
    pub time: f64,
    pub ego_index: usize,
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<Pose>,
}

impl From<&Frame> for SensorFrame {
    fn from(f: &Frame) -> SensorFrame {
        SensorFrame { time: f.time, ego_index: f.ego_index, clouds: f.clouds.clone(), poses: f.poses.clone() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub final_loss: f64,
}

/// Per-frame loss: fuse, crop, augment, mask, split, pillarize, encode,
/// decode, Chamfer. Returns `None` when the frame ends up with nothing
/// to mask.
#[allow(clippy::too_many_arguments)]
fn frame_loss(
    frame: &SensorFrame,
    bindings: &Bindings,
    encoder: &Encoder,
    decoder: &Decoder,
    spec: &BevSpec,
    crop: &CropBounds,
    cfg: &PretrainConfig,
    augment: &AugmentRanges,
    rng_tag: &str,
) -> Result<Option<Tensor>, Error> {
    let fused = early_fuse_parts(&frame.clouds, &frame.poses, frame.ego_index);
    let fused = if cfg.ego_only { fused.ego_only() } else { fused };
    let cropped = crop_range(&fused, crop);
    let mut aug_rng = rng_for(cfg.seed, &format!("pretrain/aug/{rng_tag}"));
    let params = augment.sample(&mut aug_rng);
    let fc = augment_fused(&cropped, &params, &mut aug_rng);
    let occ = build_occupancy(spec, &fc);
    if occ.n_non_empty() == 0 {
        return Ok(None);
    }
    let mut mask_rng = rng_for(cfg.seed, &format!("pretrain/mask/{rng_tag}"));
    let plan = sample_mask(&occ, cfg.mask_ratio, &mut mask_rng)?;
    if plan.masked.is_empty() {
        return Ok(None);
    }
    let (visible, plan) = split_cloud(&fc, &plan, &occ)?;
    let mut cap_rng = rng_for(cfg.seed, &format!("pretrain/cap/{rng_tag}"));
    let plan = normalize_targets(&plan, spec, cfg.z_center, cfg.z_scale, cfg.target_cap, &mut cap_rng)?;
    let mut pillar_rng = rng_for(cfg.seed, &format!("pretrain/pillar/{rng_tag}"));
    let pillars = pillarize(&visible, spec, &encoder.cfg, cfg.z_center, cfg.z_scale, &mut pillar_rng)?;
    let bev = encoder.encode(bindings, &pillars, spec)?;
    let preds = decode_recon(bindings, decoder, &bev, &plan.masked)?;
    Ok(Some(recon_loss(&preds, &plan)?))
}

/// Pretrain the encoder by masked multi-agent reconstruction and return
/// the encoder-only checkpoint plus the training curve.
pub fn pretrain(
    corpus: &[SensorFrame],
    spec: &BevSpec,
    crop: &CropBounds,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    augment: &AugmentRanges,
    config_echo: serde_json::Value,
) -> Result<PretrainOutput, Error> {
    enc_cfg.validate()?;
    cfg.validate()?;
    augment.validate()?;
    if corpus.is_empty() {
        return Err(NnError::InvalidArgument { op: "pretrain", detail: "empty corpus".into() }.into());
    }
    let mut set = ParamSet::new();
    let encoder = Encoder::register(&mut set, enc_cfg, crate::seed::child_seed(cfg.seed, "pretrain/init"));
    let decoder = Decoder::register(
        &mut set,
        enc_cfg.bev_channels,
        cfg.k_points,
        crate::seed::child_seed(cfg.seed, "pretrain/init"),
    );
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut curve = Vec::new();
    let mut final_loss = f64::NAN;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("pretrain/shuffle/{epoch}")));
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.base_lr, 0.0)?;
            let bindings = set.bind()?;
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let tag = format!("{epoch}/{idx}");
                match frame_loss(
                    &corpus[idx], &bindings, &encoder, &decoder, spec, crop, cfg, augment, &tag,
                ) {
                    Ok(Some(loss)) => losses.push(loss),
                    Ok(None) => {}
                    Err(e) => {
                        if let Error::Nn(NnError::NonFinite { op }) = &e {
                            eprintln!(
                                "numerical abort in pretraining: non-finite output of {op} at step {step}, frame {idx} (epoch {epoch})"
                            );
                        }
                        return Err(e);
                    }
                }
            }
            if !losses.is_empty() {
                let stacked = Tensor::concat(&losses, 0).map_err(Error::from)?;
                let loss = stacked.mean_axis(0, false).map_err(Error::from)?;
                let loss_value = loss.item().map_err(Error::from)?;
                let grads = backward(&loss).map_err(Error::from)?;
                adamw_step(&mut set, &bindings, &grads, lr, &adam).map_err(Error::from)?;
                curve.push(CurvePoint { step, lr, loss: loss_value });
                final_loss = loss_value;
            }
            step += 1;
        }
    }
    let meta = CheckpointMeta {
        role: CheckpointRole::PretrainedEncoder,
        steps: step,
        final_loss,
        config_echo,
    };
    // Only the encoder survives; the reconstruction decoder is
    // discarded.
    let checkpoint = Checkpoint::from_params(meta, &set, |name| name.starts_with("enc."));
    Ok(PretrainOutput { checkpoint, curve, final_loss })
}

/// Write the training curve in the `step,lr,loss` CSV format.
pub fn write_curve_csv(path: &std::path::Path, curve: &[CurvePoint]) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "step,lr,loss")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.step, p.lr, p.loss)?;
    }
    Ok(())
}
