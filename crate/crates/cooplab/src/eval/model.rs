//! The intermediate-fusion detection model: per-agent pillar encoding
//! in the ego frame, agent-wise single-head attention over BEV cells,
//! and a small convolutional detection head.

use serde::{Deserialize, Serialize};

use crate::bev::BevSpec;
use crate::fusion::{CropBounds, FusedCloud};
use crate::geometry::{Box3D, PointCloud, Vec3};
use crate::nn::{
    kaiming_uniform, Bindings, Checkpoint, CheckpointRole, NnError, ParamId, ParamSet, Tensor,
};
use crate::pretrain::{pillarize, Encoder, EncoderConfig};
use crate::seed::rng_for;

use super::{DetectConfig, EvalError};

/// One scored box in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Query/key/value projections of the agent-wise attention, initialized
/// to identity so a single agent passes through unchanged.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl FuseParams {
    pub fn register(set: &mut ParamSet, channels: usize) -> FuseParams {
        let eye = |_: usize| {
            let mut m = vec![0.0; channels * channels];
            for i in 0..channels {
                m[i * channels + i] = 1.0;
            }
            m
        };
        FuseParams {
            wq: set.add("fuse.wq", &[channels, channels], eye(0)),
            wk: set.add("fuse.wk", &[channels, channels], eye(0)),
            wv: set.add("fuse.wv", &[channels, channels], eye(0)),
        }
    }
}

/// Per BEV cell, treat the per-agent feature vectors as tokens and run
/// scaled dot-product attention with the ego token (index 0) as query.
pub fn attention_fuse(
    bindings: &Bindings,
    fuse: &FuseParams,
    feats: &[Tensor],
) -> Result<Tensor, crate::Error> {
    if feats.is_empty() {
        return Err(EvalError::ShapeMismatch("no agent features".into()).into());
    }
    let shape = feats[0].shape().to_vec();
    for f in feats {
        if f.shape() != shape {
            return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", f.shape(), shape)).into());
        }
    }
    let (c, nx, ny) = (shape[0], shape[1], shape[2]);
    let n = nx * ny;
    let flat: Vec<Tensor> = feats.iter().map(|f| f.reshape(&[c, n])).collect::<Result<_, _>>()?;
    let q = bindings.tensor(fuse.wq).matmul(&flat[0])?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = Vec::with_capacity(flat.len());
    let mut values = Vec::with_capacity(flat.len());
    for f in &flat {
        let k = bindings.tensor(fuse.wk).matmul(f)?;
        scores.push(q.mul(&k)?.sum_axis(0, true)?.scale(scale)?);
        values.push(bindings.tensor(fuse.wv).matmul(f)?);
    }
    let weights = Tensor::concat(&scores, 0)?.softmax_axis(0)?;
    let mut fused: Option<Tensor> = None;
    for (a, v) in values.iter().enumerate() {
        let contribution = weights.slice_axis0(a)?.mul(v)?;
        fused = Some(match fused {
            None => contribution,
            Some(acc) => acc.add(&contribution)?,
        });
    }
    fused.expect("at least one agent").reshape(&[c, nx, ny]).map_err(Into::into)
}

/// Detection head: shared 3x3 trunk, then 1-channel objectness and
/// 6-channel regression convolutions.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub trunk_kernel: ParamId,
    pub trunk_gamma: ParamId,
    pub trunk_beta: ParamId,
    pub cls_kernel: ParamId,
    pub cls_beta: ParamId,
    pub reg_kernel: ParamId,
    pub reg_beta: ParamId,
}

impl HeadParams {
    /// `size_prior` = (length, width): the regression bias starts at the
    /// log priors with a zero-yaw (sin 0, cos 1) orientation, so early
    /// decodes already have sane box shapes.
    pub fn register(set: &mut ParamSet, channels: usize, init_seed: u64, size_prior: (f64, f64)) -> HeadParams {
        let c = channels;
        let mut k = |name: &str, cout: usize| {
            let mut rng = rng_for(init_seed, &format!("init/{name}"));
            set.add(name, &[cout, c, 3, 3], kaiming_uniform(cout * c * 9, c * 9, &mut rng))
        };
        let trunk_kernel = k("head.trunk.kernel", c);
        let cls_kernel = k("head.cls.kernel", 1);
        let reg_kernel = k("head.reg.kernel", 6);
        let reg_bias = vec![0.0, 0.0, size_prior.0.ln(), size_prior.1.ln(), 0.0, 1.0];
        HeadParams {
            trunk_kernel,
            trunk_gamma: set.add("head.trunk.gamma", &[c], vec![1.0; c]),
            trunk_beta: set.add("head.trunk.beta", &[c], vec![0.0; c]),
            cls_kernel,
            cls_beta: set.add("head.cls.beta", &[1], vec![0.0]),
            reg_kernel,
            reg_beta: set.add("head.reg.beta", &[6], reg_bias),
        }
    }
}

/// Head activations for one frame.
pub struct HeadOutput {
    /// Objectness logits, (1, X, Y).
    pub cls: Tensor,
    /// (dx, dy, log l, log w, sin yaw, cos yaw), (6, X, Y).
    pub reg: Tensor,
}

impl HeadOutput {
    /// The combined 7-channels-per-cell view.
    pub fn combined(&self) -> Result<Tensor, NnError> {
        Tensor::concat(&[self.cls.clone(), self.reg.clone()], 0)
    }
}

/// The full detection model: shared encoder applied per agent,
/// attention fusion, detection head.
pub struct DetectionModel {
    pub set: ParamSet,
    pub encoder: Encoder,
    pub fuse: FuseParams,
    pub head: HeadParams,
    pub spec: BevSpec,
    pub crop: CropBounds,
    pub z_center: f64,
    pub z_scale: f64,
}

impl DetectionModel {
    pub fn new(
        enc_cfg: &EncoderConfig,
        spec: BevSpec,
        crop: CropBounds,
        z_center: f64,
        z_scale: f64,
        size_prior: (f64, f64),
        init_seed: u64,
    ) -> Result<DetectionModel, NnError> {
        enc_cfg.validate()?;
        let mut set = ParamSet::new();
        let encoder = Encoder::register(&mut set, enc_cfg, init_seed);
        let fuse = FuseParams::register(&mut set, enc_cfg.bev_channels);
        let head = HeadParams::register(&mut set, enc_cfg.bev_channels, init_seed, size_prior);
        Ok(DetectionModel { set, encoder, fuse, head, spec, crop, z_center, z_scale })
    }

    /// Overwrite encoder weights from a pretrained-encoder checkpoint.
    pub fn load_encoder_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), crate::Error> {
        if ckpt.meta.role != CheckpointRole::PretrainedEncoder {
            return Err(EvalError::WrongRole {
                found: ckpt.meta.role,
                expected: CheckpointRole::PretrainedEncoder,
            }
            .into());
        }
        self.set.load_values(&ckpt.params).map_err(Into::into)
    }

    /// Restore every parameter from a finetuned-model checkpoint.
    pub fn load_full_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), crate::Error> {
        if ckpt.meta.role != CheckpointRole::FinetunedModel {
            return Err(EvalError::WrongRole {
                found: ckpt.meta.role,
                expected: CheckpointRole::FinetunedModel,
            }
            .into());
        }
        self.set.load_values(&ckpt.params).map_err(Into::into)
    }

    /// Forward one frame given per-agent clouds already projected to
    /// the ego frame (ego first). `pillar_seed`/`tag` pin the pillar
    /// subsampling stream.
    pub fn forward(
        &self,
        bindings: &Bindings,
        per_agent: &[PointCloud],
        pillar_seed: u64,
        tag: &str,
    ) -> Result<HeadOutput, crate::Error> {
        let mut feats = Vec::with_capacity(per_agent.len());
        for (a, cloud) in per_agent.iter().enumerate() {
            let fused = single_cloud(cloud);
            let cropped = crate::fusion::crop_range(&fused, &self.crop);
            let mut rng = rng_for(pillar_seed, &format!("{tag}/agent{a}"));
            let pillars = pillarize(&cropped, &self.spec, &self.encoder.cfg, self.z_center, self.z_scale, &mut rng)?;
            feats.push(self.encoder.encode(bindings, &pillars, &self.spec)?);
        }
        let fused = attention_fuse(bindings, &self.fuse, &feats)?;
        let trunk = fused
            .conv2d(bindings.tensor(self.head.trunk_kernel))?
            .affine_channels(bindings.tensor(self.head.trunk_gamma), bindings.tensor(self.head.trunk_beta))?
            .relu()?;
        let ones1 = Tensor::from_vec(vec![1.0], &[1])?;
        let cls = trunk
            .conv2d(bindings.tensor(self.head.cls_kernel))?
            .affine_channels(&ones1, bindings.tensor(self.head.cls_beta))?;
        let ones6 = Tensor::from_vec(vec![1.0; 6], &[6])?;
        let reg = trunk
            .conv2d(bindings.tensor(self.head.reg_kernel))?
            .affine_channels(&ones6, bindings.tensor(self.head.reg_beta))?;
        Ok(HeadOutput { cls, reg })
    }
}

/// Wrap one uniformly labeled cloud as a fused cloud.
pub(super) fn single_cloud(cloud: &PointCloud) -> FusedCloud {
    let label = cloud.provenance().first().copied().unwrap_or(0);
    let n = cloud.len();
    FusedCloud {
        cloud: cloud.clone(),
        ego_point_count: if label == 0 { n } else { 0 },
        per_agent_counts: vec![(label, n)],
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cells whose objectness clears the threshold become boxes; offsets
/// and sizes are denormalized from the cell frame, z and height come
/// from the class priors.
pub fn decode_detections(
    output: &HeadOutput,
    spec: &BevSpec,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>, EvalError> {
    if !(cfg.score_threshold > 0.0 && cfg.score_threshold < 1.0) {
        return Err(EvalError::BadThreshold(cfg.score_threshold));
    }
    let (nx, ny) = (spec.nx, spec.ny);
    let plane = nx * ny;
    let cls = output.cls.data();
    let reg = output.reg.data();
    let mut dets = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let cell = i * ny + j;
            let score = sigmoid(cls[cell]);
            if score < cfg.score_threshold {
                continue;
            }
            let (cx, cy) = spec.grid_center((i, j));
            let dx = reg[cell];
            let dy = reg[plane + cell];
            // Sizes are regressed in log space; clamp so an untrained
            // head cannot emit kilometer boxes.
            let l = reg[2 * plane + cell].clamp(-2.5, 3.5).exp();
            let w = reg[3 * plane + cell].clamp(-2.5, 3.5).exp();
            let yaw = reg[4 * plane + cell].atan2(reg[5 * plane + cell]);
            let center = Vec3::new(
                cx + dx * spec.cell / 2.0,
                cy + dy * spec.cell / 2.0,
                cfg.box_z_prior + cfg.box_height_prior / 2.0,
            );
            dets.push(Detection { bbox: Box3D::new(center, l, w, cfg.box_height_prior, yaw), score });
        }
    }
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BevSpec {
        BevSpec::new(-8.0, 8.0, -8.0, 8.0, 2.0).unwrap()
    }

    fn feats(seed: u64, c: usize, nx: usize, ny: usize) -> Tensor {
        let mut rng = rng_for(seed, "feat");
        use rand::Rng;
        Tensor::from_vec((0..c * nx * ny).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[c, nx, ny]).unwrap()
    }

    fn fuse_set(c: usize) -> (ParamSet, FuseParams) {
        let mut set = ParamSet::new();
        let fuse = FuseParams::register(&mut set, c);
        (set, fuse)
    }

    #[test]
    fn single_agent_attention_is_identity_at_init() {
        let (set, fuse) = fuse_set(4);
        let bindings = set.bind().unwrap();
        let f = feats(1, 4, 8, 8);
        let out = attention_fuse(&bindings, &fuse, &[f.clone()]).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_agents_collapse_to_the_single_agent_case() {
        let (set, fuse) = fuse_set(4);
        let bindings = set.bind().unwrap();
        let f = feats(2, 4, 8, 8);
        let one = attention_fuse(&bindings, &fuse, &[f.clone()]).unwrap();
        let three = attention_fuse(&bindings, &fuse, &[f.clone(), f.clone(), f]).unwrap();
        for (a, b) in one.data().iter().zip(three.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_invariant_to_non_ego_permutation() {
        let (set, fuse) = fuse_set(4);
        let bindings = set.bind().unwrap();
        let ego = feats(3, 4, 8, 8);
        let c1 = feats(4, 4, 8, 8);
        let c2 = feats(5, 4, 8, 8);
        let a = attention_fuse(&bindings, &fuse, &[ego.clone(), c1.clone(), c2.clone()]).unwrap();
        let b = attention_fuse(&bindings, &fuse, &[ego, c2, c1]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let (set, fuse) = fuse_set(4);
        let bindings = set.bind().unwrap();
        let a = feats(6, 4, 8, 8);
        let b = feats(7, 4, 4, 4);
        assert!(attention_fuse(&bindings, &fuse, &[a, b]).is_err());
    }

    fn zeroed_model() -> DetectionModel {
        let enc_cfg = EncoderConfig { max_points_per_pillar: 4, pillar_feature_dim: 4, bev_channels: 4, conv_blocks: 1 };
        let crop = CropBounds { x_min: -8.0, x_max: 8.0, y_min: -8.0, y_max: 8.0, z_min: -3.0, z_max: 5.0 };
        let mut model = DetectionModel::new(&enc_cfg, spec(), crop, 0.0, 4.0, (4.5, 1.9), 3).unwrap();
        let zeros: Vec<(String, Vec<usize>, Vec<f64>)> = model
            .set
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| (p.name.clone(), p.shape.clone(), vec![0.0; p.value.len()]))
            .collect();
        model.set.load_values(&zeros).unwrap();
        model
    }

    #[test]
    fn zero_head_weights_give_logit_zero_everywhere() {
        let model = zeroed_model();
        let bindings = model.set.bind().unwrap();
        let cloud = PointCloud::from_points(vec![Vec3::new(1.0, 1.0, 0.5), Vec3::new(-3.0, 2.0, 0.2)], 0);
        let out = model.forward(&bindings, &[cloud], 0, "t").unwrap();
        assert!(out.cls.data().iter().all(|&v| v == 0.0));
        // Pre-threshold score is exactly 0.5 at logit zero.
        assert_eq!(sigmoid(out.cls.data()[0]), 0.5);
        assert_eq!(out.combined().unwrap().shape(), &[7, 8, 8]);
    }

    #[test]
    fn decode_monotone_in_threshold_and_yaw_round_trip() {
        let nx = 8;
        let mut cls = vec![-20.0; nx * nx];
        cls[9] = 3.0;
        cls[20] = 0.1;
        let mut reg = vec![0.0; 6 * nx * nx];
        let yaw: f64 = 0.73;
        reg[4 * nx * nx + 9] = yaw.sin();
        reg[5 * nx * nx + 9] = yaw.cos();
        let out = HeadOutput {
            cls: Tensor::from_vec(cls, &[1, nx, nx]).unwrap(),
            reg: Tensor::from_vec(reg, &[6, nx, nx]).unwrap(),
        };
        let mut cfg = DetectConfig::default();
        cfg.score_threshold = 0.4;
        let low = decode_detections(&out, &spec(), &cfg).unwrap();
        cfg.score_threshold = 0.9;
        let high = decode_detections(&out, &spec(), &cfg).unwrap();
        assert!(high.len() <= low.len());
        assert_eq!(low.len(), 2);
        assert_eq!(high.len(), 1);
        assert!((low[0].bbox.yaw - yaw).abs() < 1e-9);
        // Zero offsets put the box at its cell center.
        let (cx, cy) = spec().grid_center((1, 1));
        assert!((low[0].bbox.center.x - cx).abs() < 1e-12);
        assert!((low[0].bbox.center.y - cy).abs() < 1e-12);
    }

    #[test]
    fn all_logits_low_decodes_to_nothing() {
        let nx = 8;
        let out = HeadOutput {
            cls: Tensor::from_vec(vec![-50.0; nx * nx], &[1, nx, nx]).unwrap(),
            reg: Tensor::from_vec(vec![0.0; 6 * nx * nx], &[6, nx, nx]).unwrap(),
        };
        let dets = decode_detections(&out, &spec(), &DetectConfig::default()).unwrap();
        assert!(dets.is_empty());
    }
}
