//! Pillar featurization, the BEV encoder, and the reconstruction
//! decoder.

use std::rc::Rc;

use rand::Rng;

use crate::bev::{BevSpec, MaskPlan};
use crate::fusion::FusedCloud;
use crate::nn::{kaiming_uniform, Bindings, NnError, ParamId, ParamSet, Tensor};
use crate::seed::rng_for;

use super::EncoderConfig;

/// Per-point features: normalized x, y, z; offsets from the grid center
/// and the pillar's mean height; and an ego/cooperative flag.
pub const PILLAR_FEATURES: usize = 7;

/// Featurized non-empty grids of a (visible) cloud.
pub struct Pillars {
    /// Constant (P, max_points, 7) tensor; `None` when the cloud holds
    /// no in-bounds points.
    pub features: Option<Tensor>,
    pub cells: Rc<Vec<(usize, usize)>>,
}

impl Pillars {
    pub fn count(&self) -> usize {
        self.cells.len()
    }
}

/// Bucket the visible cloud into pillars and featurize each point.
/// Pillars holding more than `max_points_per_pillar` points are
/// uniformly subsampled (deterministic under the rng).
pub fn pillarize(
    visible: &FusedCloud,
    spec: &BevSpec,
    cfg: &EncoderConfig,
    z_center: f64,
    z_scale: f64,
    rng: &mut impl Rng,
) -> Result<Pillars, NnError> {
    let occ = crate::bev::build_occupancy(spec, visible);
    let cells: Vec<(usize, usize)> = occ.non_empty.clone();
    if cells.is_empty() {
        return Ok(Pillars { features: None, cells: Rc::new(cells) });
    }
    let m = cfg.max_points_per_pillar;
    let hx = (spec.x_max - spec.x_min) / 2.0;
    let hy = (spec.y_max - spec.y_min) / 2.0;
    let mx = (spec.x_max + spec.x_min) / 2.0;
    let my = (spec.y_max + spec.y_min) / 2.0;
    let mut data = vec![0.0; cells.len() * m * PILLAR_FEATURES];
    for (p, cell) in cells.iter().enumerate() {
        let idxs = occ.cell_points(*cell);
        let kept: Vec<usize> = if idxs.len() > m {
            let mut pick = rand::seq::index::sample(rng, idxs.len(), m).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| idxs[k]).collect()
        } else {
            idxs.to_vec()
        };
        let mean_z: f64 =
            kept.iter().map(|&i| visible.cloud.points()[i].z).sum::<f64>() / kept.len() as f64;
        let (cx, cy) = spec.grid_center(*cell);
        for (slot, &i) in kept.iter().enumerate() {
            let pt = visible.cloud.points()[i];
            let coop = (visible.cloud.provenance()[i] != 0) as usize as f64;
            let row = (p * m + slot) * PILLAR_FEATURES;
            data[row] = (pt.x - mx) / hx;
            data[row + 1] = (pt.y - my) / hy;
            data[row + 2] = (pt.z - z_center) / z_scale;
            data[row + 3] = (pt.x - cx) / (spec.cell / 2.0);
            data[row + 4] = (pt.y - cy) / (spec.cell / 2.0);
            data[row + 5] = (pt.z - mean_z) / z_scale;
            data[row + 6] = coop;
        }
    }
    let features = Tensor::from_vec(data, &[cells.len(), m, PILLAR_FEATURES])?;
    Ok(Pillars { features: Some(features), cells: Rc::new(cells) })
}

/// One conv block: 3x3 same-resolution convolution, per-channel affine,
/// relu.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Pillar encoder producing the (C, X, Y) BEV feature map.
///
/// The per-point net is a shared bias-free linear + relu + max over the
/// pillar's points, so zero-padded slots behave exactly like points
/// clipped by the relu.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub point_w: ParamId,
    pub convs: Vec<ConvBlock>,
    pub cfg: EncoderConfig,
}

impl Encoder {
    /// Register encoder parameters under the `enc.` prefix. Weights are
    /// Kaiming-uniform from per-parameter-name seeds, affines start at
    /// identity.
    pub fn register(set: &mut ParamSet, cfg: &EncoderConfig, init_seed: u64) -> Encoder {
        let c0 = cfg.pillar_feature_dim;
        let c = cfg.bev_channels;
        let point_w = {
            let mut rng = rng_for(init_seed, "init/enc.point_w");
            set.add("enc.point_w", &[PILLAR_FEATURES, c0], kaiming_uniform(PILLAR_FEATURES * c0, PILLAR_FEATURES, &mut rng))
        };
        let mut convs = Vec::with_capacity(cfg.conv_blocks);
        for b in 0..cfg.conv_blocks {
            let cin = if b == 0 { c0 } else { c };
            let name = format!("enc.conv{b}.kernel");
            let mut rng = rng_for(init_seed, &format!("init/{name}"));
            let kernel = set.add(&name, &[c, cin, 3, 3], kaiming_uniform(c * cin * 9, cin * 9, &mut rng));
            let gamma = set.add(&format!("enc.conv{b}.gamma"), &[c], vec![1.0; c]);
            let beta = set.add(&format!("enc.conv{b}.beta"), &[c], vec![0.0; c]);
            convs.push(ConvBlock { kernel, gamma, beta });
        }
        Encoder { point_w, convs, cfg: *cfg }
    }

    /// Scatter pillar features onto the BEV plane before any
    /// convolution: (C0, X, Y), zeros where no pillar exists.
    pub fn pillar_bev(&self, bindings: &Bindings, pillars: &Pillars, spec: &BevSpec) -> Result<Tensor, NnError> {
        let c0 = self.cfg.pillar_feature_dim;
        match &pillars.features {
            None => Tensor::zeros(&[c0, spec.nx, spec.ny]),
            Some(feats) => {
                let p = feats.shape()[0];
                let m = feats.shape()[1];
                let flat = feats.reshape(&[p * m, PILLAR_FEATURES])?;
                let pointwise = flat.matmul(bindings.tensor(self.point_w))?.relu()?;
                let per_pillar = pointwise.reshape(&[p, m, c0])?.max_axis(1, false)?;
                per_pillar.scatter_to_bev(pillars.cells.clone(), spec.nx, spec.ny)
            }
        }
    }

    /// Full encoding: pillar scatter followed by the conv backbone.
    pub fn encode(&self, bindings: &Bindings, pillars: &Pillars, spec: &BevSpec) -> Result<Tensor, NnError> {
        let mut x = self.pillar_bev(bindings, pillars, spec)?;
        for block in &self.convs {
            x = x
                .conv2d(bindings.tensor(block.kernel))?
                .affine_channels(bindings.tensor(block.gamma), bindings.tensor(block.beta))?
                .relu()?;
        }
        Ok(x)
    }
}

/// Reconstruction decoder: one 3x3 convolution from the BEV features to
/// 3K channels, read at each masked cell and reshaped to K points with
/// x, y squashed into the grid-local [-1, 1] square.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub kernel: ParamId,
    pub beta: ParamId,
    pub k_points: usize,
}

impl Decoder {
    pub fn register(set: &mut ParamSet, bev_channels: usize, k_points: usize, init_seed: u64) -> Decoder {
        let out = 3 * k_points;
        let mut rng = rng_for(init_seed, "init/dec.kernel");
        let kernel = set.add("dec.kernel", &[out, bev_channels, 3, 3], kaiming_uniform(out * bev_channels * 9, bev_channels * 9, &mut rng));
        let beta = set.add("dec.beta", &[out], vec![0.0; out]);
        Decoder { kernel, beta, k_points }
    }
}

/// Predictions for the masked grids: (G, K, 3) in normalized grid-local
/// coordinates.
pub fn decode_recon(
    bindings: &Bindings,
    dec: &Decoder,
    bev: &Tensor,
    masked: &[(usize, usize)],
) -> Result<Tensor, NnError> {
    if masked.is_empty() {
        return Err(NnError::InvalidArgument { op: "decode_recon", detail: "no masked grids".into() });
    }
    let out_channels = 3 * dec.k_points;
    let gamma = Tensor::from_vec(vec![1.0; out_channels], &[out_channels])?;
    let full = bev
        .conv2d(bindings.tensor(dec.kernel))?
        .affine_channels(&gamma, bindings.tensor(dec.beta))?;
    let cells = Rc::new(masked.to_vec());
    let g = masked.len();
    full.gather_cells(cells)?
        .reshape(&[g * dec.k_points, 3])?
        .squash_xy()?
        .reshape(&[g, dec.k_points, 3])
}

/// Mean per-grid Chamfer loss over every masked grid.
pub fn recon_loss(predictions: &Tensor, plan: &MaskPlan) -> Result<Tensor, NnError> {
    let targets = plan.norm_targets.as_ref().ok_or(NnError::InvalidArgument {
        op: "recon_loss",
        detail: "plan targets not normalized".into(),
    })?;
    if predictions.shape()[0] != plan.masked.len() {
        return Err(NnError::ShapeMismatch {
            op: "recon_loss",
            detail: format!("{} predictions for {} masked grids", predictions.shape()[0], plan.masked.len()),
        });
    }
    predictions.chamfer_batch(Rc::new(targets.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, Vec3};

    fn spec() -> BevSpec {
        BevSpec::new(-8.0, 8.0, -8.0, 8.0, 1.0).unwrap()
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { max_points_per_pillar: 4, pillar_feature_dim: 6, bev_channels: 5, conv_blocks: 2 }
    }

    fn fused(points: Vec<(Vec3, u32)>) -> FusedCloud {
        let mut cloud = PointCloud::new();
        let mut ego = 0;
        for (p, a) in &points {
            if *a == 0 {
                ego += 1;
            }
            cloud.push(*p, *a);
        }
        let n = cloud.len();
        FusedCloud { cloud, ego_point_count: ego, per_agent_counts: vec![(0, ego), (1, n - ego)] }
    }

    #[test]
    fn empty_cloud_yields_zero_pillars_and_zero_bev() {
        let mut rng = rng_for(0, "p");
        let fc = fused(vec![]);
        let pillars = pillarize(&fc, &spec(), &tiny_cfg(), 0.0, 4.0, &mut rng).unwrap();
        assert_eq!(pillars.count(), 0);
        let mut set = ParamSet::new();
        let enc = Encoder::register(&mut set, &tiny_cfg(), 3);
        let bindings = set.bind().unwrap();
        let base = enc.pillar_bev(&bindings, &pillars, &spec()).unwrap();
        assert!(base.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_at_grid_center_has_zero_offsets() {
        let mut rng = rng_for(0, "p");
        let fc = fused(vec![(Vec3::new(0.5, 0.5, 0.0), 0)]);
        let pillars = pillarize(&fc, &spec(), &tiny_cfg(), 0.0, 4.0, &mut rng).unwrap();
        let data = pillars.features.unwrap();
        // Offsets (features 3..6) vanish; provenance flag is 0.
        assert!(data.data()[3].abs() < 1e-12);
        assert!(data.data()[4].abs() < 1e-12);
        assert!(data.data()[5].abs() < 1e-12);
        assert_eq!(data.data()[6], 0.0);
    }

    #[test]
    fn pillar_cap_keeps_exactly_max_points() {
        let mut rng = rng_for(0, "p");
        let pts = (0..50).map(|i| (Vec3::new(0.3, 0.3, i as f64 * 0.01), 0)).collect();
        let fc = fused(pts);
        let cfg = tiny_cfg();
        let pillars = pillarize(&fc, &spec(), &cfg, 0.0, 4.0, &mut rng).unwrap();
        assert_eq!(pillars.count(), 1);
        let feats = pillars.features.unwrap();
        assert_eq!(feats.shape(), &[1, cfg.max_points_per_pillar, PILLAR_FEATURES]);
        // All slots are filled (no zero padding rows).
        let nonzero_rows = feats
            .data()
            .chunks(PILLAR_FEATURES)
            .filter(|row| row.iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero_rows, cfg.max_points_per_pillar);
    }

    #[test]
    fn encoding_is_invariant_to_point_order_within_pillars() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let enc = Encoder::register(&mut set, &cfg, 7);
        let bindings = set.bind().unwrap();
        let pts: Vec<(Vec3, u32)> = vec![
            (Vec3::new(0.2, 0.4, 0.1), 0),
            (Vec3::new(0.6, 0.1, 0.9), 1),
            (Vec3::new(0.9, 0.8, -0.4), 0),
        ];
        let mut reversed = pts.clone();
        reversed.reverse();
        let mut rng = rng_for(0, "p");
        let a = pillarize(&fused(pts), &spec(), &cfg, 0.0, 4.0, &mut rng).unwrap();
        let b = pillarize(&fused(reversed), &spec(), &cfg, 0.0, 4.0, &mut rng).unwrap();
        let fa = enc.encode(&bindings, &a, &spec()).unwrap();
        let fb = enc.encode(&bindings, &b, &spec()).unwrap();
        assert_eq!(fa.data(), fb.data());
    }

    #[test]
    fn encoder_output_shape_is_c_by_grid() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let enc = Encoder::register(&mut set, &cfg, 7);
        let bindings = set.bind().unwrap();
        let mut rng = rng_for(0, "p");
        let fc = fused(vec![(Vec3::new(0.5, 0.5, 0.2), 0), (Vec3::new(-3.0, 2.0, 0.8), 1)]);
        let pillars = pillarize(&fc, &spec(), &cfg, 0.0, 4.0, &mut rng).unwrap();
        let bev = enc.encode(&bindings, &pillars, &spec()).unwrap();
        assert_eq!(bev.shape(), &[cfg.bev_channels, 16, 16]);
    }

    #[test]
    fn zero_decoder_weights_predict_grid_centers() {
        let mut set = ParamSet::new();
        let dec = Decoder::register(&mut set, 5, 4, 9);
        set.load_values(&[
            ("dec.kernel".into(), vec![12, 5, 3, 3], vec![0.0; 12 * 5 * 9]),
            ("dec.beta".into(), vec![12], vec![0.0; 12]),
        ])
        .unwrap();
        let bindings = set.bind().unwrap();
        let bev = Tensor::from_vec((0..5 * 16 * 16).map(|i| (i % 13) as f64 * 0.1).collect(), &[5, 16, 16]).unwrap();
        let preds = decode_recon(&bindings, &dec, &bev, &[(2, 3), (10, 10)]).unwrap();
        assert_eq!(preds.shape(), &[2, 4, 3]);
        assert!(preds.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_emits_exactly_k_points_per_grid() {
        let mut set = ParamSet::new();
        let dec = Decoder::register(&mut set, 5, 20, 9);
        let bindings = set.bind().unwrap();
        let bev = Tensor::from_vec(vec![0.3; 5 * 16 * 16], &[5, 16, 16]).unwrap();
        let preds = decode_recon(&bindings, &dec, &bev, &[(0, 0)]).unwrap();
        assert_eq!(preds.shape(), &[1, 20, 3]);
        // x, y stay inside the squashed range.
        for row in preds.data().chunks(3) {
            assert!(row[0].abs() <= 1.0 && row[1].abs() <= 1.0);
        }
    }

    #[test]
    fn predictions_only_see_the_3x3_neighborhood() {
        let mut set = ParamSet::new();
        let dec = Decoder::register(&mut set, 3, 2, 11);
        let bindings = set.bind().unwrap();
        let base = vec![0.25; 3 * 16 * 16];
        let bev0 = Tensor::from_vec(base.clone(), &[3, 16, 16]).unwrap();
        let target_cell = (4usize, 4usize);
        let preds0 = decode_recon(&bindings, &dec, &bev0, &[target_cell]).unwrap();
        // Perturb a far cell: no change.
        let mut far = base.clone();
        far[2 * 256 + 12 * 16 + 12] += 5.0;
        let preds_far =
            decode_recon(&bindings, &dec, &Tensor::from_vec(far, &[3, 16, 16]).unwrap(), &[target_cell]).unwrap();
        assert_eq!(preds0.data(), preds_far.data());
        // Perturb an adjacent cell: the prediction moves.
        let mut near = base;
        near[5 * 16 + 5] += 5.0;
        let preds_near =
            decode_recon(&bindings, &dec, &Tensor::from_vec(near, &[3, 16, 16]).unwrap(), &[target_cell]).unwrap();
        assert_ne!(preds0.data(), preds_near.data());
    }

    #[test]
    fn recon_loss_is_the_mean_of_per_grid_chamfer() {
        let preds = Tensor::var(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, 1, 3]).unwrap();
        let plan = MaskPlan {
            masked: vec![(0, 0), (1, 1)],
            raw_targets: vec![vec![], vec![]],
            norm_targets: Some(vec![vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 0.0]]]),
            ratio_used: 1.0,
        };
        let loss = recon_loss(&preds, &plan).unwrap();
        // Grid 0 reconstructs perfectly (0), grid 1 pays 1 + 1 = 2.
        assert!((loss.item().unwrap() - 1.0).abs() < 1e-12);
        // Single grid equals its own chamfer.
        let single = Tensor::var(vec![1.0, 0.0, 0.0], &[1, 1, 3]).unwrap();
        let plan1 = MaskPlan {
            masked: vec![(0, 0)],
            raw_targets: vec![vec![]],
            norm_targets: Some(vec![vec![[0.0, 0.0, 0.0]]]),
            ratio_used: 1.0,
        };
        assert!((recon_loss(&single, &plan1).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_coverage_mismatch_is_an_error() {
        let preds = Tensor::var(vec![0.0, 0.0, 0.0], &[1, 1, 3]).unwrap();
        let plan = MaskPlan {
            masked: vec![(0, 0), (1, 1)],
            raw_targets: vec![vec![], vec![]],
            norm_targets: Some(vec![vec![[0.0; 3]], vec![[0.0; 3]]]),
            ratio_used: 1.0,
        };
        assert!(recon_loss(&preds, &plan).is_err());
    }
}
