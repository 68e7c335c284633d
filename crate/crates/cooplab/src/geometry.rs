//! Rigid-body math, point-cloud containers, and pretraining augmentations.
//!
//! Everything here is a pure function on immutable inputs; all
//! coordinates are 64-bit meters.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (residual {residual:.3e})")]
    NotARotation { residual: f64 },
    #[error("non-finite component in {what}")]
    NonFinite { what: &'static str },
    #[error("invalid augmentation parameters: {reason}")]
    BadAugment { reason: String },
}

/// A 3D point or displacement, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation about +z by `yaw` radians.
    pub fn rotation_z(yaw: f64) -> Mat3 {
        let (s, c) = yaw.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn transpose(self) -> Mat3 {
        let m = self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(self, o: Mat3) -> Mat3 {
        let a = self.0;
        let b = o.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Mat3(out)
    }

    pub fn apply(self, v: Vec3) -> Vec3 {
        let m = self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn det(self) -> f64 {
        let m = self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max absolute entry of `R * R^T - I`.
    pub fn orthonormality_residual(self) -> f64 {
        let p = self.mul(self.transpose()).0;
        let mut worst: f64 = 0.0;
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Rigid transform: `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Mat3, translation: Vec3) -> Pose {
        Pose { rotation, translation }
    }

    pub fn from_yaw_translation(yaw: f64, translation: Vec3) -> Pose {
        Pose::new(Mat3::rotation_z(yaw), translation)
    }

    /// Yaw angle of the rotated x-axis in the world x/y plane.
    pub fn yaw(&self) -> f64 {
        self.rotation.0[1][0].atan2(self.rotation.0[0][0])
    }

    /// Orthonormality (tolerance 1e-9 on `R R^T - I`), det +1, finite.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.translation.is_finite()
            && self.rotation.0.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::NonFinite { what: "pose" });
        }
        let residual = self.rotation.orthonormality_residual();
        if residual > 1e-9 || (self.rotation.det() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation { residual });
        }
        Ok(())
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.apply(p).add(self.translation)
    }
}

/// `pose_compose(a, b)` applies `b` first, then `a`.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation.mul(b.rotation),
        translation: a.rotation.apply(b.translation).add(a.translation),
    }
}

pub fn pose_inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose { rotation: rt, translation: rt.apply(p.translation.scale(-1.0)) }
}

/// Points with per-point provenance: which agent produced each return.
/// By convention the ego agent is 0 and cooperative agents are 1..=N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vec3>,
    provenance: Vec<u32>,
}

impl PointCloud {
    pub fn new() -> PointCloud {
        PointCloud { points: Vec::new(), provenance: Vec::new() }
    }

    /// All points attributed to a single agent.
    pub fn from_points(points: Vec<Vec3>, agent: u32) -> PointCloud {
        let provenance = vec![agent; points.len()];
        PointCloud { points, provenance }
    }

    pub fn from_parts(points: Vec<Vec3>, provenance: Vec<u32>) -> PointCloud {
        assert_eq!(points.len(), provenance.len(), "provenance length must match points");
        PointCloud { points, provenance }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn provenance(&self) -> &[u32] {
        &self.provenance
    }

    pub fn push(&mut self, p: Vec3, agent: u32) {
        self.points.push(p);
        self.provenance.push(agent);
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.provenance.extend_from_slice(&other.provenance);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec3, u32)> + '_ {
        self.points.iter().copied().zip(self.provenance.iter().copied())
    }

    /// Keep only points whose provenance passes the filter, preserving order.
    pub fn filter_provenance(&self, keep: impl Fn(u32) -> bool) -> PointCloud {
        let mut out = PointCloud::new();
        for (p, a) in self.iter() {
            if keep(a) {
                out.push(p, a);
            }
        }
        out
    }
}

impl Default for PointCloud {
    fn default() -> Self {
        PointCloud::new()
    }
}

/// Transform every point; provenance and order are preserved.
pub fn transform_points(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    let points = cloud.points.iter().map(|&p| pose.transform_point(p)).collect();
    PointCloud { points, provenance: cloud.provenance.clone() }
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = yaw.rem_euclid(two_pi);
    if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Oriented box: yaw about +z, sizes in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, length: f64, width: f64, height: f64, yaw: f64) -> Box3D {
        Box3D { center, length, width, height, yaw: normalize_yaw(yaw) }
    }

    pub fn bev_area(&self) -> f64 {
        self.length * self.width
    }

    /// BEV corners in world coordinates, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(x, y)| (self.center.x + c * x - s * y, self.center.y + c * y + s * x))
    }

    /// Point expressed in the box frame.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = p.sub(self.center);
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Unsigned distance from a point to the box surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let l = self.to_local(p);
        let q = Vec3::new(
            l.x.abs() - self.length / 2.0,
            l.y.abs() - self.width / 2.0,
            l.z.abs() - self.height / 2.0,
        );
        let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        (outside + inside).abs()
    }

    /// BEV distance of the box center from the frame origin.
    pub fn bev_range(&self) -> f64 {
        (self.center.x * self.center.x + self.center.y * self.center.y).sqrt()
    }
}

/// One sampled set of augmentation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Uniform scale about the origin.
    pub scale: f64,
    /// Rotation about +z, radians.
    pub yaw: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    /// Fraction of points kept by random subsampling, in (0, 1].
    pub keep_ratio: f64,
}

impl AugmentParams {
    pub fn identity() -> AugmentParams {
        AugmentParams { scale: 1.0, yaw: 0.0, flip_x: false, flip_y: false, keep_ratio: 1.0 }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(GeometryError::BadAugment { reason: format!("scale {} must be > 0", self.scale) });
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(GeometryError::BadAugment {
                reason: format!("keep_ratio {} must be in (0, 1]", self.keep_ratio),
            });
        }
        if !self.yaw.is_finite() {
            return Err(GeometryError::BadAugment { reason: "yaw must be finite".into() });
        }
        Ok(())
    }
}

/// Ranges the augmentation parameters are sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub scale: [f64; 2],
    pub yaw: [f64; 2],
    pub flip_prob: f64,
    pub keep_ratio: [f64; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            scale: [0.95, 1.05],
            yaw: [-0.3926991, 0.3926991],
            flip_prob: 0.5,
            keep_ratio: [0.8, 1.0],
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ordered = self.scale[0] <= self.scale[1]
            && self.yaw[0] <= self.yaw[1]
            && self.keep_ratio[0] <= self.keep_ratio[1];
        if !ordered || self.scale[0] <= 0.0 || self.keep_ratio[0] <= 0.0 || self.keep_ratio[1] > 1.0 {
            return Err(GeometryError::BadAugment { reason: "bad augmentation ranges".into() });
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(GeometryError::BadAugment { reason: "flip_prob must be in [0, 1]".into() });
        }
        Ok(())
    }

    fn sample_range(bounds: [f64; 2], rng: &mut impl Rng) -> f64 {
        if bounds[0] == bounds[1] {
            bounds[0]
        } else {
            rng.gen_range(bounds[0]..bounds[1])
        }
    }

    /// One draw of augmentation parameters.
    pub fn sample(&self, rng: &mut impl Rng) -> AugmentParams {
        AugmentParams {
            scale: Self::sample_range(self.scale, rng),
            yaw: Self::sample_range(self.yaw, rng),
            flip_x: rng.gen::<f64>() < self.flip_prob,
            flip_y: rng.gen::<f64>() < self.flip_prob,
            keep_ratio: Self::sample_range(self.keep_ratio, rng),
        }
    }

    /// Same draw with subsampling disabled (finetuning keeps every
    /// point).
    pub fn sample_without_downsampling(&self, rng: &mut impl Rng) -> AugmentParams {
        AugmentParams { keep_ratio: 1.0, ..self.sample(rng) }
    }
}

/// Transform a box consistently with [`augment_point`]: scale sizes,
/// rotate the yaw, and mirror it under flips.
pub fn augment_box(b: &Box3D, a: &AugmentParams) -> Box3D {
    let center = augment_point(b.center, a);
    let mut yaw = b.yaw + a.yaw;
    if a.flip_x {
        yaw = std::f64::consts::PI - yaw;
    }
    if a.flip_y {
        yaw = -yaw;
    }
    Box3D::new(center, b.length * a.scale, b.width * a.scale, b.height * a.scale, yaw)
}

/// Apply one point of the augmentation transform (no subsampling):
/// scale, then yaw rotation, then axis flips.
pub fn augment_point(p: Vec3, a: &AugmentParams) -> Vec3 {
    let mut q = Mat3::rotation_z(a.yaw).apply(p.scale(a.scale));
    if a.flip_x {
        q.x = -q.x;
    }
    if a.flip_y {
        q.y = -q.y;
    }
    q
}

/// Scale about origin, rotate about z, flip axes, then keep
/// `round(keep_ratio * n)` points by uniform subsampling (input order
/// preserved). Deterministic given the rng state.
pub fn augment(cloud: &PointCloud, a: &AugmentParams, rng: &mut impl Rng) -> PointCloud {
    let transformed: Vec<Vec3> = cloud.points.iter().map(|&p| augment_point(p, a)).collect();
    let n = transformed.len();
    let keep = (a.keep_ratio * n as f64).round() as usize;
    if keep >= n {
        return PointCloud { points: transformed, provenance: cloud.provenance.clone() };
    }
    let mut idx = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    let points = idx.iter().map(|&i| transformed[i]).collect();
    let provenance = idx.iter().map(|&i| cloud.provenance[i]).collect();
    PointCloud { points, provenance }
}
