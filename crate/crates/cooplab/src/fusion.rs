//! Early fusion: project every cooperative cloud into the ego frame and
//! merge with provenance.
//!
//! Projection uses the *reported* poses, so localization noise injected
//! upstream propagates into the fused geometry exactly as it would in a
//! real system.

use serde::{Deserialize, Serialize};

use crate::geometry::{pose_compose, pose_inverse, transform_points, PointCloud, Vec3};
use crate::sim::Frame;

/// Merged multi-agent cloud in the ego frame. Provenance is relabeled:
/// ego points are 0, cooperative agents 1..=N in scenario index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCloud {
    pub cloud: PointCloud,
    pub ego_point_count: usize,
    /// (relabeled agent id, point count), ego first.
    pub per_agent_counts: Vec<(u32, usize)>,
}

impl FusedCloud {
    pub fn total_points(&self) -> usize {
        self.cloud.len()
    }

    /// Just the ego-sourced points (provenance 0).
    pub fn ego_only(&self) -> FusedCloud {
        let cloud = self.cloud.filter_provenance(|a| a == 0);
        let n = cloud.len();
        FusedCloud { cloud, ego_point_count: n, per_agent_counts: vec![(0, n)] }
    }
}

/// Per-agent clouds projected into the ego frame, ego first, with
/// relabeled provenance. The concatenation of the result is exactly
/// [`early_fuse`].
pub fn project_to_ego_parts(
    clouds: &[PointCloud],
    poses: &[crate::geometry::Pose],
    ego_index: usize,
) -> Vec<PointCloud> {
    let ego_inv = pose_inverse(&poses[ego_index]);
    let mut out = Vec::with_capacity(clouds.len());
    let ego = &clouds[ego_index];
    out.push(PointCloud::from_points(ego.points().to_vec(), 0));
    let mut label = 1u32;
    for (i, cloud) in clouds.iter().enumerate() {
        if i == ego_index {
            continue;
        }
        let rel = pose_compose(&ego_inv, &poses[i]);
        let projected = transform_points(&rel, cloud);
        out.push(PointCloud::from_points(projected.points().to_vec(), label));
        label += 1;
    }
    out
}

/// [`project_to_ego_parts`] over a rendered frame.
pub fn project_to_ego(frame: &Frame) -> Vec<PointCloud> {
    project_to_ego_parts(&frame.clouds, &frame.poses, frame.ego_index)
}

/// Merge all agents into one ego-frame cloud: ego points first, then
/// cooperative agents by index.
pub fn early_fuse_parts(
    clouds: &[PointCloud],
    poses: &[crate::geometry::Pose],
    ego_index: usize,
) -> FusedCloud {
    let per_agent = project_to_ego_parts(clouds, poses, ego_index);
    let mut cloud = PointCloud::new();
    let mut per_agent_counts = Vec::with_capacity(per_agent.len());
    for part in &per_agent {
        let label = part.provenance().first().copied().unwrap_or(per_agent_counts.len() as u32);
        per_agent_counts.push((label, part.len()));
        cloud.extend_from(part);
    }
    FusedCloud { ego_point_count: per_agent_counts[0].1, cloud, per_agent_counts }
}

/// [`early_fuse_parts`] over a rendered frame.
pub fn early_fuse(frame: &Frame) -> FusedCloud {
    early_fuse_parts(&frame.clouds, &frame.poses, frame.ego_index)
}

/// Axis-aligned crop limits in the ego frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl CropBounds {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x > self.x_min
            && p.x < self.x_max
            && p.y > self.y_min
            && p.y < self.y_max
            && p.z > self.z_min
            && p.z < self.z_max
    }

    pub fn validate(&self) -> Result<(), crate::bev::BevError> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max || self.z_min >= self.z_max {
            return Err(crate::bev::BevError::BadSpec("degenerate crop bounds".into()));
        }
        Ok(())
    }
}

/// Keep points strictly inside the bounds; counts are recomputed.
pub fn crop_range(fc: &FusedCloud, bounds: &CropBounds) -> FusedCloud {
    let cloud = {
        let mut out = PointCloud::new();
        for (p, a) in fc.cloud.iter() {
            if bounds.contains(p) {
                out.push(p, a);
            }
        }
        out
    };
    let mut per_agent_counts: Vec<(u32, usize)> =
        fc.per_agent_counts.iter().map(|&(label, _)| (label, 0)).collect();
    for &a in cloud.provenance() {
        if let Some(entry) = per_agent_counts.iter_mut().find(|(label, _)| *label == a) {
            entry.1 += 1;
        }
    }
    let ego_point_count = per_agent_counts.first().map(|&(_, n)| n).unwrap_or(0);
    FusedCloud { cloud, ego_point_count, per_agent_counts }
}

/// Apply one shared augmentation transform to the fused cloud.
pub fn augment_fused(
    fc: &FusedCloud,
    params: &crate::geometry::AugmentParams,
    rng: &mut impl rand::Rng,
) -> FusedCloud {
    let cloud = crate::geometry::augment(&fc.cloud, params, rng);
    let mut per_agent_counts: Vec<(u32, usize)> =
        fc.per_agent_counts.iter().map(|&(label, _)| (label, 0)).collect();
    for &a in cloud.provenance() {
        if let Some(entry) = per_agent_counts.iter_mut().find(|(label, _)| *label == a) {
            entry.1 += 1;
        }
    }
    let ego_point_count = per_agent_counts.first().map(|&(_, n)| n).unwrap_or(0);
    FusedCloud { cloud, ego_point_count, per_agent_counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, Pose};
    use crate::sim::{Frame, GtBox};

    fn frame_with(clouds: Vec<PointCloud>, poses: Vec<Pose>) -> Frame {
        Frame { time: 0.0, ego_index: 0, clouds, poses, gt_boxes: Vec::<GtBox>::new() }
    }

    #[test]
    fn zero_coop_agents_is_the_ego_cloud() {
        let ego = PointCloud::from_points(vec![Vec3::new(1.0, 2.0, 0.5)], 0);
        let frame = frame_with(vec![ego.clone()], vec![Pose::IDENTITY]);
        let fused = early_fuse(&frame);
        assert_eq!(fused.cloud, ego);
        assert_eq!(fused.ego_point_count, 1);
    }

    #[test]
    fn coop_sensor_origin_maps_to_its_position_in_ego_frame() {
        let ego_pose = Pose::from_yaw_translation(0.3, Vec3::new(5.0, -2.0, 1.8));
        let coop_pose = Pose::from_yaw_translation(-1.0, Vec3::new(20.0, 7.0, 1.8));
        let frame = frame_with(
            vec![PointCloud::from_points(vec![Vec3::ZERO], 0), PointCloud::from_points(vec![Vec3::ZERO], 1)],
            vec![ego_pose, coop_pose],
        );
        let fused = early_fuse(&frame);
        let got = fused.cloud.points()[1];
        let want = crate::geometry::pose_inverse(&ego_pose).transform_point(coop_pose.translation);
        assert!(got.sub(want).norm() < 1e-12);
    }

    #[test]
    fn counts_add_up_and_order_is_ego_first() {
        let frame = frame_with(
            vec![
                PointCloud::from_points(vec![Vec3::ZERO; 3], 0),
                PointCloud::from_points(vec![Vec3::ZERO; 2], 1),
                PointCloud::from_points(vec![Vec3::ZERO; 5], 2),
            ],
            vec![Pose::IDENTITY; 3],
        );
        let fused = early_fuse(&frame);
        assert_eq!(fused.total_points(), 10);
        assert_eq!(fused.per_agent_counts, vec![(0, 3), (1, 2), (2, 5)]);
        let total: usize = fused.per_agent_counts.iter().map(|&(_, n)| n).sum();
        assert_eq!(total, fused.total_points());
        assert_eq!(&fused.cloud.provenance()[..3], &[0, 0, 0]);
    }

    #[test]
    fn identity_poses_make_fusion_a_concatenation() {
        let a = PointCloud::from_points(vec![Vec3::new(1.0, 0.0, 0.0)], 0);
        let b = PointCloud::from_points(vec![Vec3::new(0.0, 1.0, 0.0)], 1);
        let frame = frame_with(vec![a, b], vec![Pose::IDENTITY, Pose::IDENTITY]);
        let fused = early_fuse(&frame);
        assert_eq!(fused.cloud.points(), &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)]);
    }

    #[test]
    fn shared_world_point_coincides_across_agents() {
        // A world point seen by two agents lands on identical ego
        // coordinates when the poses are exact.
        let mut rng = crate::seed::rng_for(7, "fusion/shared");
        use rand::Rng;
        for _ in 0..100 {
            let ego_pose = Pose::from_yaw_translation(rng.gen_range(-3.0..3.0), Vec3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 1.8));
            let coop_pose = Pose::from_yaw_translation(rng.gen_range(-3.0..3.0), Vec3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), 5.0));
            let world = Vec3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(0.0..3.0));
            let ego_local = crate::geometry::pose_inverse(&ego_pose).transform_point(world);
            let coop_local = crate::geometry::pose_inverse(&coop_pose).transform_point(world);
            let frame = frame_with(
                vec![PointCloud::from_points(vec![ego_local], 0), PointCloud::from_points(vec![coop_local], 1)],
                vec![ego_pose, coop_pose],
            );
            let fused = early_fuse(&frame);
            let d = fused.cloud.points()[0].sub(fused.cloud.points()[1]).norm();
            assert!(d < 1e-9, "coincidence violated by {d}");
        }
    }

    #[test]
    fn fusion_is_invariant_to_coop_order_up_to_relabeling() {
        let ego = PointCloud::from_points(vec![Vec3::ZERO], 0);
        let c1 = PointCloud::from_points(vec![Vec3::new(1.0, 0.0, 0.0)], 1);
        let c2 = PointCloud::from_points(vec![Vec3::new(2.0, 0.0, 0.0)], 2);
        let p1 = Pose::from_yaw_translation(0.0, Vec3::new(10.0, 0.0, 0.0));
        let p2 = Pose::from_yaw_translation(0.0, Vec3::new(-10.0, 0.0, 0.0));
        let fa = early_fuse(&frame_with(vec![ego.clone(), c1.clone(), c2.clone()], vec![Pose::IDENTITY, p1, p2]));
        let fb = early_fuse(&frame_with(vec![ego, c2, c1], vec![Pose::IDENTITY, p2, p1]));
        let mut pa: Vec<_> = fa.cloud.points().to_vec();
        let mut pb: Vec<_> = fb.cloud.points().to_vec();
        pa.sort_by(|a, b| a.x.total_cmp(&b.x));
        pb.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert_eq!(pa, pb);
    }

    #[test]
    fn crop_identity_and_empty() {
        let mut cloud = PointCloud::new();
        for i in 0..10 {
            cloud.push(Vec3::new(i as f64, 0.0, 0.0), 0);
        }
        let fc = FusedCloud { ego_point_count: 10, per_agent_counts: vec![(0, 10)], cloud };
        let all = CropBounds { x_min: -100.0, x_max: 100.0, y_min: -100.0, y_max: 100.0, z_min: -10.0, z_max: 10.0 };
        assert_eq!(crop_range(&fc, &all), fc);
        let none = CropBounds { x_min: 50.0, x_max: 60.0, ..all };
        assert_eq!(crop_range(&fc, &none).total_points(), 0);
    }

    #[test]
    fn half_plane_crop_halves_a_symmetric_cloud() {
        let mut cloud = PointCloud::new();
        for i in 1..=500 {
            cloud.push(Vec3::new(i as f64 * 0.1, 0.0, 0.0), 0);
            cloud.push(Vec3::new(-(i as f64) * 0.1, 0.0, 0.0), 0);
        }
        let fc = FusedCloud { ego_point_count: 1000, per_agent_counts: vec![(0, 1000)], cloud };
        let half = CropBounds { x_min: 0.0, x_max: 1e6, y_min: -1.0, y_max: 1.0, z_min: -1.0, z_max: 1.0 };
        let cropped = crop_range(&fc, &half);
        assert_eq!(cropped.total_points(), 500);
    }

    #[test]
    fn noisy_coop_pose_shifts_projected_points() {
        let world = Vec3::new(10.0, 0.0, 0.0);
        let coop_pose = Pose::new(Mat3::IDENTITY, Vec3::new(0.0, 5.0, 0.0));
        let coop_local = crate::geometry::pose_inverse(&coop_pose).transform_point(world);
        let mut frame = frame_with(
            vec![PointCloud::from_points(vec![world], 0), PointCloud::from_points(vec![coop_local], 1)],
            vec![Pose::IDENTITY, coop_pose],
        );
        // Report a pose 1 m off: fusion must follow the report.
        frame.poses[1].translation.x += 1.0;
        let fused = early_fuse(&frame);
        let d = fused.cloud.points()[1].sub(world);
        assert!((d.x - 1.0).abs() < 1e-12 && d.y.abs() < 1e-12);
    }
}
