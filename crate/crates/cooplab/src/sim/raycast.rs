//! Ray casting against oriented boxes and the ground plane.

use rand::Rng;

use crate::geometry::{Box3D, PointCloud, Pose, Vec3};

use super::SensorConfig;

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Nearest intersection distance of a ray with an oriented box, via a
/// slab test in the box frame. A sensor inside the box reports the exit
/// face (still a surface point).
pub fn ray_box_intersect(ray: &Ray, bbox: &Box3D) -> Option<f64> {
    let o = bbox.to_local(ray.origin);
    let (s, c) = bbox.yaw.sin_cos();
    let d = Vec3::new(
        c * ray.direction.x + s * ray.direction.y,
        -s * ray.direction.x + c * ray.direction.y,
        ray.direction.z,
    );
    let half = [bbox.length / 2.0, bbox.width / 2.0, bbox.height / 2.0];
    let origin = [o.x, o.y, o.z];
    let dir = [d.x, d.y, d.z];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if origin[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (mut t0, mut t1) = ((-half[axis] - origin[axis]) * inv, (half[axis] - origin[axis]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 1e-9 {
        return None;
    }
    Some(if t_near > 1e-9 { t_near } else { t_far })
}

/// Raycast returning the cloud plus per-box hit counts.
pub(super) fn raycast_with_hits(
    boxes: &[Box3D],
    sensor_pose: &Pose,
    cfg: &SensorConfig,
    rng: &mut impl Rng,
) -> (PointCloud, Vec<usize>) {
    let mut cloud = PointCloud::new();
    let mut hits = vec![0usize; boxes.len()];
    let origin = sensor_pose.translation;
    let n_azimuth = (2.0 * std::f64::consts::PI / cfg.azimuth_step).floor() as usize;
    for &elevation in &cfg.elevation_angles {
        let (se, ce) = elevation.sin_cos();
        for k in 0..n_azimuth {
            let azimuth = k as f64 * cfg.azimuth_step;
            let (sa, ca) = azimuth.sin_cos();
            let dir_local = Vec3::new(ce * ca, ce * sa, se);
            let dir_world = sensor_pose.rotation.apply(dir_local);
            let ray = Ray { origin, direction: dir_world };

            let mut best: Option<(f64, Option<usize>)> = None;
            for (b, bbox) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_intersect(&ray, bbox) {
                    if t <= cfg.max_range && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, Some(b)));
                    }
                }
            }
            // Ground plane z = 0.
            if dir_world.z < -1e-12 {
                let t = -origin.z / dir_world.z;
                if t > 1e-9 && t <= cfg.max_range && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, None));
                }
            }
            if let Some((t, hit_box)) = best {
                if cfg.dropout_prob > 0.0 && rng.gen::<f64>() < cfg.dropout_prob {
                    continue;
                }
                if let Some(b) = hit_box {
                    hits[b] += 1;
                }
                cloud.push(dir_local.scale(t), 0);
            }
        }
    }
    (cloud, hits)
}

/// Point cloud seen by a sensor at `sensor_pose`, expressed in the
/// sensor's local frame.
pub fn raycast_lidar(
    boxes: &[Box3D],
    sensor_pose: &Pose,
    cfg: &SensorConfig,
    rng: &mut impl Rng,
) -> PointCloud {
    raycast_with_hits(boxes, sensor_pose, cfg, rng).0
}
