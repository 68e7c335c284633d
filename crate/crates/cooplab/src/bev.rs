//! The BEV plane and the masking strategy driving pretraining: bin
//! points into grids, sample masked non-empty grids at the target
//! ratio, and split the cloud into visible input and per-grid
//! reconstruction targets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedCloud;
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid BEV spec: {0}")]
    BadSpec(String),
    #[error("mask plan does not match occupancy: {0}")]
    PlanMismatch(String),
    #[error("invalid masking ratio {0}; must be in [0, 1]")]
    BadRatio(f64),
}

/// Geometry of the X x Y BEV plane. Grid counts are derived from the
/// extent and cell size, which must divide it evenly (1e-9 tolerance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Meters per grid side. Matches the encoder's BEV feature
    /// resolution by construction.
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
}

impl BevSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Result<BevSpec, BevError> {
        if cell <= 0.0 {
            return Err(BevError::BadSpec(format!("cell {cell} must be > 0")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(BevError::BadSpec("empty extent".into()));
        }
        let fx = (x_max - x_min) / cell;
        let fy = (y_max - y_min) / cell;
        let nx = fx.round();
        let ny = fy.round();
        if (fx - nx).abs() > 1e-9 || (fy - ny).abs() > 1e-9 {
            return Err(BevError::BadSpec(format!(
                "extent must be an integral number of cells (got {fx} x {fy})"
            )));
        }
        Ok(BevSpec { x_min, x_max, y_min, y_max, cell, nx: nx as usize, ny: ny as usize })
    }

    /// Grid of a point by its x, y coordinates; `None` when outside
    /// (right-open intervals, so the max boundary is out of bounds).
    pub fn point_to_grid(&self, p: Vec3) -> Option<(usize, usize)> {
        let dx = p.x - self.x_min;
        let dy = p.y - self.y_min;
        if dx < 0.0 || dy < 0.0 {
            return None;
        }
        let i = (dx / self.cell).floor() as usize;
        let j = (dy / self.cell).floor() as usize;
        if i >= self.nx || j >= self.ny {
            return None;
        }
        Some((i, j))
    }

    /// Center of grid (i, j).
    pub fn grid_center(&self, cell: (usize, usize)) -> (f64, f64) {
        (
            self.x_min + (cell.0 as f64 + 0.5) * self.cell,
            self.y_min + (cell.1 as f64 + 0.5) * self.cell,
        )
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }
}

/// Per-grid point-index lists over a cloud.
#[derive(Debug, Clone)]
pub struct Occupancy {
    pub spec: BevSpec,
    /// Point indices per cell, indexed `i * ny + j`.
    cells: Vec<Vec<usize>>,
    /// Non-empty cells in row-major order.
    pub non_empty: Vec<(usize, usize)>,
    /// Indices of points outside the plane.
    pub out_of_bounds: Vec<usize>,
    n_points: usize,
}

impl Occupancy {
    pub fn cell_points(&self, cell: (usize, usize)) -> &[usize] {
        &self.cells[cell.0 * self.spec.ny + cell.1]
    }

    pub fn n_non_empty(&self) -> usize {
        self.non_empty.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }
}

/// Exact partition of the cloud's points into grid cells.
pub fn build_occupancy(spec: &BevSpec, fc: &FusedCloud) -> Occupancy {
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); spec.n_cells()];
    let mut out_of_bounds = Vec::new();
    for (idx, p) in fc.cloud.points().iter().enumerate() {
        match spec.point_to_grid(*p) {
            Some((i, j)) => cells[i * spec.ny + j].push(idx),
            None => out_of_bounds.push(idx),
        }
    }
    let mut non_empty = Vec::new();
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            if !cells[i * spec.ny + j].is_empty() {
                non_empty.push((i, j));
            }
        }
    }
    Occupancy { spec: *spec, cells, non_empty, out_of_bounds, n_points: fc.cloud.len() }
}

/// The sampled set of masked grids with their reconstruction targets.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    /// Masked cells, sorted row-major. Every one was non-empty.
    pub masked: Vec<(usize, usize)>,
    /// Ego-frame target points per masked cell (complete, uncapped).
    pub raw_targets: Vec<Vec<Vec3>>,
    /// Grid-local normalized targets, populated by
    /// [`normalize_targets`]; capped for loss memory.
    pub norm_targets: Option<Vec<Vec<[f64; 3]>>>,
    pub ratio_used: f64,
}

/// Uniformly sample `round(ratio * |non_empty|)` distinct non-empty
/// grids. Targets are filled in by [`split_cloud`].
pub fn sample_mask(occ: &Occupancy, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan, BevError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BevError::BadRatio(ratio));
    }
    let n = occ.n_non_empty();
    let want = (ratio * n as f64).round() as usize;
    let mut masked: Vec<(usize, usize)> = if want == 0 {
        Vec::new()
    } else {
        rand::seq::index::sample(rng, n, want).into_iter().map(|k| occ.non_empty[k]).collect()
    };
    masked.sort_unstable();
    Ok(MaskPlan { masked, raw_targets: Vec::new(), norm_targets: None, ratio_used: ratio })
}

/// Everything not in a masked grid (out-of-bounds points are dropped
/// from the visible input), plus the plan with per-grid targets filled.
///
/// Multiset conservation: visible + raw targets + out-of-bounds equals
/// the input cloud exactly.
pub fn split_cloud(fc: &FusedCloud, plan: &MaskPlan, occ: &Occupancy) -> Result<(FusedCloud, MaskPlan), BevError> {
    if occ.n_points() != fc.cloud.len() {
        return Err(BevError::PlanMismatch(format!(
            "occupancy built over {} points, cloud has {}",
            occ.n_points(),
            fc.cloud.len()
        )));
    }
    let mut is_masked_point = vec![false; fc.cloud.len()];
    let mut raw_targets = Vec::with_capacity(plan.masked.len());
    for &cell in &plan.masked {
        let idxs = occ.cell_points(cell);
        if idxs.is_empty() {
            return Err(BevError::PlanMismatch(format!("masked cell {cell:?} is empty in the occupancy")));
        }
        let mut target = Vec::with_capacity(idxs.len());
        for &idx in idxs {
            is_masked_point[idx] = true;
            target.push(fc.cloud.points()[idx]);
        }
        raw_targets.push(target);
    }
    let mut oob = vec![false; fc.cloud.len()];
    for &idx in &occ.out_of_bounds {
        oob[idx] = true;
    }
    let mut visible = PointCloud::new();
    for (idx, (p, a)) in fc.cloud.iter().enumerate() {
        if !is_masked_point[idx] && !oob[idx] {
            visible.push(p, a);
        }
    }
    let mut per_agent_counts: Vec<(u32, usize)> =
        fc.per_agent_counts.iter().map(|&(label, _)| (label, 0)).collect();
    for &a in visible.provenance() {
        if let Some(entry) = per_agent_counts.iter_mut().find(|(label, _)| *label == a) {
            entry.1 += 1;
        }
    }
    let ego_point_count = per_agent_counts.first().map(|&(_, n)| n).unwrap_or(0);
    let visible = FusedCloud { cloud: visible, ego_point_count, per_agent_counts };
    let plan = MaskPlan {
        masked: plan.masked.clone(),
        raw_targets,
        norm_targets: None,
        ratio_used: plan.ratio_used,
    };
    Ok((visible, plan))
}

/// Map each target point into its grid's local frame:
/// `((x-cx)/cell*2, (y-cy)/cell*2, (z-z_center)/z_scale)`, so x and y
/// land in [-1, 1]. Grids holding more than `cap` points are uniformly
/// subsampled to bound the loss memory; the raw targets stay complete.
pub fn normalize_targets(
    plan: &MaskPlan,
    spec: &BevSpec,
    z_center: f64,
    z_scale: f64,
    cap: usize,
    rng: &mut impl Rng,
) -> Result<MaskPlan, BevError> {
    if z_scale <= 0.0 {
        return Err(BevError::BadSpec("z_scale must be > 0".into()));
    }
    if cap == 0 {
        return Err(BevError::BadSpec("target cap must be >= 1".into()));
    }
    let mut norm = Vec::with_capacity(plan.masked.len());
    for (cell, raw) in plan.masked.iter().zip(&plan.raw_targets) {
        let (cx, cy) = spec.grid_center(*cell);
        let chosen: Vec<Vec3> = if raw.len() > cap {
            let mut idx = rand::seq::index::sample(rng, raw.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| raw[i]).collect()
        } else {
            raw.clone()
        };
        norm.push(
            chosen
                .into_iter()
                .map(|p| {
                    [
                        (p.x - cx) / spec.cell * 2.0,
                        (p.y - cy) / spec.cell * 2.0,
                        (p.z - z_center) / z_scale,
                    ]
                })
                .collect(),
        );
    }
    Ok(MaskPlan {
        masked: plan.masked.clone(),
        raw_targets: plan.raw_targets.clone(),
        norm_targets: Some(norm),
        ratio_used: plan.ratio_used,
    })
}

/// Invert the normalization of one target point.
pub fn denormalize_target(spec: &BevSpec, cell: (usize, usize), p: [f64; 3], z_center: f64, z_scale: f64) -> Vec3 {
    let (cx, cy) = spec.grid_center(cell);
    Vec3::new(cx + p[0] * spec.cell / 2.0, cy + p[1] * spec.cell / 2.0, z_center + p[2] * z_scale)
}
