//! Detection finetuning and the metrics it reports.

use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::BevSpec;
use crate::fusion::{project_to_ego, CropBounds};
use crate::geometry::{augment, augment_box, AugmentParams, AugmentRanges, PointCloud};
use crate::nn::{
    adamw_step, backward, cosine_lr, AdamConfig, Bindings, Checkpoint, CheckpointMeta, CheckpointRole,
    NnError, Tensor,
};
use crate::pretrain::{CurvePoint, EncoderConfig};
use crate::seed::rng_for;
use crate::sim::{Frame, GtBox};
use crate::Error;

use super::metrics::ApSample;
use super::model::{decode_detections, DetectionModel, Detection};
use super::{DetectConfig, FinetuneConfig, InitMode};

/// Pillar subsampling at evaluation time draws from a fixed stream so a
/// given checkpoint always scores identically.
const EVAL_PILLAR_SEED: u64 = 0x45AB_0011;

const SMOOTH_L1_BETA: f64 = 1.0;

/// Detections plus labels for one evaluated frame.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// AP at each configured IoU threshold, overall and per range bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_frames: usize,
    pub iou_thresholds: Vec<f64>,
    pub overall: Vec<Option<f64>>,
    pub range_buckets: Vec<(f64, f64)>,
    /// Indexed `[threshold][bucket]`.
    pub per_bucket: Vec<Vec<Option<f64>>>,
}

impl MetricsReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&t| t == threshold)
            .and_then(|i| self.overall[i])
    }
}

pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsReport,
    pub curve: Vec<CurvePoint>,
    /// Train-subset frame indices that were actually used.
    pub labeled_indices: Vec<usize>,
}

/// The deterministic nested label subset: fractions of the same seed
/// share a prefix, so the 20% subset is contained in the 50% one.
pub fn label_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "finetune/labelsubset"));
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    order.truncate(k);
    order
}

/// Regression target for a positive cell.
fn regression_target(spec: &BevSpec, cell: (usize, usize), bbox: &crate::geometry::Box3D) -> [f64; 6] {
    let (cx, cy) = spec.grid_center(cell);
    [
        (bbox.center.x - cx) / (spec.cell / 2.0),
        (bbox.center.y - cy) / (spec.cell / 2.0),
        bbox.length.ln(),
        bbox.width.ln(),
        bbox.yaw.sin(),
        bbox.yaw.cos(),
    ]
}

struct FrameTargets {
    positives: Vec<(usize, usize)>,
    reg_targets: Vec<f64>,
}

/// Cells holding an observed, in-bounds ground-truth center, plus their
/// regression targets. Duplicate cells keep the first box.
fn assign_targets(spec: &BevSpec, crop: &CropBounds, gts: &[GtBox], aug: &AugmentParams) -> FrameTargets {
    let mut positives = Vec::new();
    let mut reg_targets = Vec::new();
    let mut taken = HashSet::new();
    for gt in gts {
        if !gt.observed {
            continue;
        }
        let bbox = augment_box(&gt.bbox, aug);
        if !crop.contains(bbox.center) {
            continue;
        }
        if let Some(cell) = spec.point_to_grid(bbox.center) {
            if taken.insert(cell) {
                positives.push(cell);
                reg_targets.extend_from_slice(&regression_target(spec, cell, &bbox));
            }
        }
    }
    FrameTargets { positives, reg_targets }
}

/// Objectness + regression loss for one frame.
#[allow(clippy::too_many_arguments)]
fn frame_loss(
    model: &DetectionModel,
    bindings: &Bindings,
    frame: &Frame,
    detect: &DetectConfig,
    augment_ranges: &AugmentRanges,
    seed: u64,
    tag: &str,
) -> Result<Tensor, Error> {
    let mut aug_rng = rng_for(seed, &format!("finetune/aug/{tag}"));
    let params = augment_ranges.sample_without_downsampling(&mut aug_rng);
    let per_agent: Vec<PointCloud> = project_to_ego(frame)
        .iter()
        .map(|cloud| augment(cloud, &params, &mut aug_rng))
        .collect();
    let targets = assign_targets(&model.spec, &model.crop, &frame.gt_boxes, &params);

    let output = model.forward(bindings, &per_agent, seed, &format!("finetune/pillar/{tag}"))?;

    // 4:1 negative subsampling over the remaining cells.
    let positive_set: HashSet<(usize, usize)> = targets.positives.iter().copied().collect();
    let n_neg = (detect.negative_ratio * targets.positives.len()).max(2 * detect.negative_ratio);
    let candidates: Vec<(usize, usize)> = (0..model.spec.nx)
        .flat_map(|i| (0..model.spec.ny).map(move |j| (i, j)))
        .filter(|c| !positive_set.contains(c))
        .collect();
    let mut neg_rng = rng_for(seed, &format!("finetune/negatives/{tag}"));
    let mut negatives: Vec<(usize, usize)> = if candidates.len() > n_neg {
        rand::seq::index::sample(&mut neg_rng, candidates.len(), n_neg)
            .into_iter()
            .map(|k| candidates[k])
            .collect()
    } else {
        candidates
    };
    negatives.sort_unstable();

    let mut cells = targets.positives.clone();
    cells.extend_from_slice(&negatives);
    let mut cls_targets = vec![1.0; targets.positives.len()];
    cls_targets.extend(vec![0.0; negatives.len()]);

    let logits = output.cls.gather_cells(Rc::new(cells))?.reshape(&[cls_targets.len()])?;
    let cls_loss = logits.bce_with_logits_mean(Rc::new(cls_targets))?;
    if targets.positives.is_empty() {
        return Ok(cls_loss);
    }
    let reg_sel = output.reg.gather_cells(Rc::new(targets.positives.clone()))?;
    let reg_loss = reg_sel.smooth_l1_mean(Rc::new(targets.reg_targets), SMOOTH_L1_BETA)?;
    cls_loss.add(&reg_loss.scale(detect.lambda_reg)?).map_err(Into::into)
}

/// Score a model on a set of frames. Frames evaluate independently (and
/// in parallel); aggregation order is fixed, so results are
/// deterministic for a given model and frame list.
///
/// Labels whose centers fall outside the BEV plane are out of the
/// detector's range and are excluded from matching, like
/// unobserved-flagged boxes.
pub fn evaluate_model(
    model: &DetectionModel,
    frames: &[Frame],
    detect: &DetectConfig,
) -> Result<(MetricsReport, Vec<EvalSample>), Error> {
    detect.validate()?;
    let samples: Vec<EvalSample> = frames
        .par_iter()
        .enumerate()
        .map(|(idx, frame)| -> Result<EvalSample, Error> {
            let bindings = model.set.bind()?;
            let per_agent = project_to_ego(frame);
            let output = model.forward(&bindings, &per_agent, EVAL_PILLAR_SEED, &format!("eval/{idx}"))?;
            let dets = decode_detections(&output, &model.spec, detect)?;
            let dets = super::metrics::nms(&dets, detect.nms_iou)?;
            let gts = frame
                .gt_boxes
                .iter()
                .filter(|g| model.spec.point_to_grid(g.bbox.center).is_some())
                .copied()
                .collect();
            Ok(EvalSample { dets, gts })
        })
        .collect::<Result<_, _>>()?;
    let views: Vec<ApSample<'_>> =
        samples.iter().map(|s| ApSample { dets: &s.dets, gts: &s.gts }).collect();
    let mut overall = Vec::new();
    let mut per_bucket = Vec::new();
    for &thr in &detect.iou_thresholds {
        overall.push(super::metrics::compute_ap(&views, thr)?);
        per_bucket.push(super::metrics::range_bucketed_ap(&views, &detect.range_buckets, thr)?);
    }
    let report = MetricsReport {
        n_frames: frames.len(),
        iou_thresholds: detect.iou_thresholds.clone(),
        overall,
        range_buckets: detect.range_buckets.clone(),
        per_bucket,
    };
    Ok((report, samples))
}

/// Train the detector on the labeled fraction of `train`, evaluate on
/// `test`, and return the finetuned checkpoint plus metrics.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    train: &[Frame],
    test: &[Frame],
    enc_cfg: &EncoderConfig,
    spec: BevSpec,
    crop: CropBounds,
    z_center: f64,
    z_scale: f64,
    ft: &FinetuneConfig,
    detect: &DetectConfig,
    augment_ranges: &AugmentRanges,
    init_checkpoint: Option<&Checkpoint>,
    config_echo: serde_json::Value,
) -> Result<FinetuneOutput, Error> {
    ft.validate()?;
    detect.validate()?;
    augment_ranges.validate()?;
    if train.is_empty() {
        return Err(NnError::InvalidArgument { op: "finetune", detail: "empty train set".into() }.into());
    }
    if ft.init == InitMode::FromCheckpoint && init_checkpoint.is_none() {
        return Err(super::EvalError::InvalidConfig("init = from_checkpoint but no checkpoint given".into()).into());
    }
    let mut model = DetectionModel::new(
        enc_cfg,
        spec,
        crop,
        z_center,
        z_scale,
        (detect.box_length_prior, detect.box_width_prior),
        crate::seed::child_seed(ft.seed, "finetune/init"),
    )?;
    if let Some(ckpt) = init_checkpoint {
        model.load_encoder_checkpoint(ckpt)?;
    }
    let labeled = label_subset(train.len(), ft.label_fraction, ft.seed);
    let adam = AdamConfig { weight_decay: ft.weight_decay, ..AdamConfig::default() };
    let steps_per_epoch = labeled.len().div_ceil(ft.batch_size);
    let total_steps = (ft.epochs * steps_per_epoch) as u64;
    let mut curve = Vec::new();
    let mut final_loss = f64::NAN;
    let mut step = 0u64;
    for epoch in 0..ft.epochs {
        let mut order = labeled.clone();
        order.shuffle(&mut rng_for(ft.seed, &format!("finetune/shuffle/{epoch}")));
        for batch in order.chunks(ft.batch_size) {
            let lr = cosine_lr(step, total_steps, ft.base_lr, 0.0)?;
            let bindings = model.set.bind()?;
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let tag = format!("{epoch}/{idx}");
                match frame_loss(&model, &bindings, &train[idx], detect, augment_ranges, ft.seed, &tag) {
                    Ok(loss) => losses.push(loss),
                    Err(e) => {
                        if let Error::Nn(NnError::NonFinite { op }) = &e {
                            eprintln!(
                                "numerical abort in finetuning: non-finite output of {op} at step {step}, frame {idx} (epoch {epoch})"
                            );
                        }
                        return Err(e);
                    }
                }
            }
            let stacked = Tensor::concat(&losses, 0).map_err(Error::from)?;
            let loss = stacked.mean_axis(0, false).map_err(Error::from)?;
            final_loss = loss.item().map_err(Error::from)?;
            let grads = backward(&loss).map_err(Error::from)?;
            adamw_step(&mut model.set, &bindings, &grads, lr, &adam).map_err(Error::from)?;
            curve.push(CurvePoint { step, lr, loss: final_loss });
            step += 1;
        }
    }
    let (metrics, _) = evaluate_model(&model, test, detect)?;
    let meta = CheckpointMeta { role: CheckpointRole::FinetunedModel, steps: step, final_loss, config_echo };
    let checkpoint = Checkpoint::from_params(meta, &model.set, |_| true);
    Ok(FinetuneOutput { checkpoint, metrics, curve, labeled_indices: labeled })
}

/// Rebuild a detection model from a finetuned checkpoint.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    enc_cfg: &EncoderConfig,
    spec: BevSpec,
    crop: CropBounds,
    z_center: f64,
    z_scale: f64,
) -> Result<DetectionModel, Error> {
    // Initialization is irrelevant here: the checkpoint overwrites
    // every parameter.
    let mut model = DetectionModel::new(enc_cfg, spec, crop, z_center, z_scale, (4.5, 1.9), 0)?;
    model.load_full_checkpoint(ckpt)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, render_frame, ScenarioConfig, ScenarioFamily, SensorConfig};

    fn sensor(max_range: f64) -> SensorConfig {
        SensorConfig {
            mount_height: 1.8,
            elevation_angles: (0..6).map(|i| -0.3 + 0.06 * i as f64).collect(),
            azimuth_step: 0.06,
            max_range,
            dropout_prob: 0.0,
        }
    }

    fn tiny_frames(seed: u64) -> Vec<Frame> {
        let cfg = ScenarioConfig {
            n_coop_agents: 1,
            n_objects: 4,
            area_bounds: 30.0,
            duration: 0.6,
            frame_rate: 10.0,
            scenario_family: ScenarioFamily::Intersection,
            seed,
            truck_fraction: 0.0,
        };
        let scenario = generate_scenario(&cfg, &sensor(40.0), &sensor(60.0)).unwrap();
        (0..scenario.n_frames())
            .map(|i| render_frame(&scenario, scenario.frame_time(i), 0).unwrap())
            .collect()
    }

    fn tiny_setup() -> (EncoderConfig, BevSpec, CropBounds) {
        (
            EncoderConfig { max_points_per_pillar: 8, pillar_feature_dim: 8, bev_channels: 8, conv_blocks: 1 },
            BevSpec::new(-32.0, 32.0, -32.0, 32.0, 4.0).unwrap(),
            CropBounds { x_min: -32.0, x_max: 32.0, y_min: -32.0, y_max: 32.0, z_min: -3.0, z_max: 5.0 },
        )
    }

    #[test]
    fn label_subsets_are_nested_and_seeded() {
        let a20 = label_subset(100, 0.2, 7);
        let a50 = label_subset(100, 0.5, 7);
        let a80 = label_subset(100, 0.8, 7);
        assert_eq!(a20.len(), 20);
        assert_eq!(a50.len(), 50);
        assert_eq!(a80.len(), 80);
        assert_eq!(&a50[..20], &a20[..]);
        assert_eq!(&a80[..50], &a50[..]);
        assert_ne!(label_subset(100, 0.2, 8), a20);
        // Tiny fractions still label at least one frame.
        assert_eq!(label_subset(3, 0.01, 1).len(), 1);
    }

    #[test]
    fn finetune_is_deterministic_and_scratch_equals_no_checkpoint() {
        let frames = tiny_frames(9);
        let (enc, spec, crop) = tiny_setup();
        let ft = FinetuneConfig { epochs: 1, batch_size: 2, seed: 4, ..FinetuneConfig::default() };
        let detect = DetectConfig::default();
        let aug = AugmentRanges::default();
        let run = || {
            finetune(
                &frames[..4],
                &frames[4..],
                &enc,
                spec,
                crop,
                0.0,
                4.0,
                &ft,
                &detect,
                &aug,
                None,
                serde_json::json!({}),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.metrics, b.metrics);
        for ((n0, _, v0), (_, _, v1)) in a.checkpoint.params.iter().zip(&b.checkpoint.params) {
            assert_eq!(v0, v1, "{n0} differs");
        }
    }

    #[test]
    fn loading_an_identically_seeded_checkpoint_reproduces_scratch() {
        let (enc, spec, crop) = tiny_setup();
        let seed = crate::seed::child_seed(4, "finetune/init");
        let scratch = DetectionModel::new(&enc, spec, crop, 0.0, 4.0, (4.5, 1.9), seed).unwrap();
        // Save its encoder as a "pretrained" checkpoint and reload.
        let meta = CheckpointMeta {
            role: CheckpointRole::PretrainedEncoder,
            steps: 0,
            final_loss: 0.0,
            config_echo: serde_json::json!({}),
        };
        let ckpt = Checkpoint::from_params(meta, &scratch.set, |n| n.starts_with("enc."));
        let mut loaded = DetectionModel::new(&enc, spec, crop, 0.0, 4.0, (4.5, 1.9), seed).unwrap();
        loaded.load_encoder_checkpoint(&ckpt).unwrap();
        for (a, b) in scratch.set.iter().zip(loaded.set.iter()) {
            assert_eq!(a.value, b.value, "{} differs", a.name);
        }
    }

    #[test]
    fn wrong_checkpoint_role_is_refused() {
        let (enc, spec, crop) = tiny_setup();
        let model = DetectionModel::new(&enc, spec, crop, 0.0, 4.0, (4.5, 1.9), 1).unwrap();
        let meta = CheckpointMeta {
            role: CheckpointRole::FinetunedModel,
            steps: 0,
            final_loss: 0.0,
            config_echo: serde_json::json!({}),
        };
        let ckpt = Checkpoint::from_params(meta, &model.set, |_| true);
        let mut other = DetectionModel::new(&enc, spec, crop, 0.0, 4.0, (4.5, 1.9), 1).unwrap();
        assert!(other.load_encoder_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let frames = tiny_frames(10);
        let (enc, spec, crop) = tiny_setup();
        let model = DetectionModel::new(&enc, spec, crop, 0.0, 4.0, (4.5, 1.9), 2).unwrap();
        let detect = DetectConfig::default();
        let (a, _) = evaluate_model(&model, &frames, &detect).unwrap();
        let (b, _) = evaluate_model(&model, &frames, &detect).unwrap();
        assert_eq!(a, b);
    }
}
