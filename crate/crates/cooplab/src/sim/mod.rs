//! Synthetic V2X scenarios: moving box-shaped objects observed by
//! heterogeneous vehicle and infrastructure LiDARs, plus the
//! perturbation injectors used by the robustness harness.

pub mod dataset;
mod raycast;
mod scenario;

pub use raycast::{raycast_lidar, ray_box_intersect, Ray};
pub use scenario::generate_scenario;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_yaw, Box3D, Mat3, PointCloud, Pose, Vec3};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place object {object} without overlap after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
    #[error("time {t} outside scenario duration [0, {duration}]")]
    InvalidTime { t: f64, duration: f64 },
    #[error("delayed capture time {t} is negative")]
    NegativeCaptureTime { t: f64 },
    #[error("agent index {index} out of range ({agents} agents)")]
    BadAgentIndex { index: usize, agents: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Spinning-LiDAR model: one ray per (elevation, azimuth) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Height of the sensor above the agent base, meters.
    pub mount_height: f64,
    pub elevation_angles: Vec<f64>,
    pub azimuth_step: f64,
    pub max_range: f64,
    /// Probability of dropping an otherwise valid return.
    pub dropout_prob: f64,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.max_range <= 0.0 {
            return Err(SimError::InvalidConfig("max_range must be > 0".into()));
        }
        if self.azimuth_step <= 0.0 {
            return Err(SimError::InvalidConfig("azimuth_step must be > 0".into()));
        }
        if self.elevation_angles.is_empty() {
            return Err(SimError::InvalidConfig("at least one elevation channel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(SimError::InvalidConfig("dropout_prob must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Evenly spaced channels between two elevation bounds.
    pub fn with_elevation_span(mut self, lo: f64, hi: f64, channels: usize) -> SensorConfig {
        self.elevation_angles = (0..channels)
            .map(|i| lo + (hi - lo) * i as f64 / (channels.max(2) - 1) as f64)
            .collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Infrastructure,
}

/// Piecewise-linear pose track; yaw-only rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time: f64,
    pub position: Vec3,
    pub yaw: f64,
}

impl Trajectory {
    pub fn fixed(position: Vec3, yaw: f64) -> Trajectory {
        Trajectory { waypoints: vec![Waypoint { time: 0.0, position, yaw }] }
    }

    /// Pose at time `t`, clamped to the track ends.
    pub fn sample(&self, t: f64) -> Pose {
        let wps = &self.waypoints;
        if wps.len() == 1 || t <= wps[0].time {
            let w = wps[0];
            return Pose::from_yaw_translation(w.yaw, w.position);
        }
        if t >= wps[wps.len() - 1].time {
            let w = wps[wps.len() - 1];
            return Pose::from_yaw_translation(w.yaw, w.position);
        }
        let hi = wps.partition_point(|w| w.time <= t).min(wps.len() - 1);
        let (a, b) = (wps[hi - 1], wps[hi]);
        let u = (t - a.time) / (b.time - a.time);
        let position = a.position.add(b.position.sub(a.position).scale(u));
        let yaw = a.yaw + normalize_yaw(b.yaw - a.yaw) * u;
        Pose::from_yaw_translation(yaw, position)
    }

    pub fn is_static(&self) -> bool {
        self.waypoints.len() == 1
            || self.waypoints.iter().all(|w| {
                w.position == self.waypoints[0].position && w.yaw == self.waypoints[0].yaw
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub sensor: SensorConfig,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class: ObjectClass,
    /// (length, width, height), meters.
    pub size: (f64, f64, f64),
    pub trajectory: Trajectory,
}

impl SceneObject {
    /// World-frame box at time `t`; the trajectory tracks the base, the
    /// box center sits half a height above it.
    pub fn box_at(&self, t: f64) -> Box3D {
        let pose = self.trajectory.sample(t);
        let center = pose.translation.add(Vec3::new(0.0, 0.0, self.size.2 / 2.0));
        Box3D::new(center, self.size.0, self.size.1, self.size.2, pose.yaw())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioFamily {
    Intersection,
    Corridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_coop_agents: usize,
    pub n_objects: usize,
    /// Half-extent of the populated area, meters.
    pub area_bounds: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub scenario_family: ScenarioFamily,
    pub seed: u64,
    /// Fraction of objects that are trucks rather than cars.
    pub truck_fraction: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.area_bounds <= 0.0 {
            return Err(SimError::InvalidConfig("area_bounds must be > 0".into()));
        }
        if self.duration <= 0.0 || self.frame_rate <= 0.0 {
            return Err(SimError::InvalidConfig("duration and frame_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.truck_fraction) {
            return Err(SimError::InvalidConfig("truck_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A fully specified world: agents plus object tracks. Frames are
/// derived from it deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub agents: Vec<AgentSpec>,
    pub objects: Vec<SceneObject>,
}

impl Scenario {
    pub fn n_frames(&self) -> usize {
        (self.config.duration * self.config.frame_rate).round() as usize
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.config.frame_rate
    }

    /// World sensor pose of agent `i` at time `t` (base pose lifted by
    /// the mount height).
    pub fn sensor_pose(&self, agent: usize, t: f64) -> Pose {
        let spec = &self.agents[agent];
        let base = spec.trajectory.sample(t);
        pose_lift(&base, spec.sensor.mount_height)
    }
}

fn pose_lift(base: &Pose, dz: f64) -> Pose {
    crate::geometry::pose_compose(base, &Pose::new(Mat3::IDENTITY, Vec3::new(0.0, 0.0, dz)))
}

/// Ground-truth box with bookkeeping flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub object_id: u32,
    pub class: ObjectClass,
    pub bbox: Box3D,
    /// False when no agent returned a single LiDAR point from it.
    pub observed: bool,
}

/// One synchronized multi-agent observation with labels, boxes in the
/// ego sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub ego_index: usize,
    /// Per-agent clouds in each agent's local sensor frame; provenance
    /// is the scenario agent index.
    pub clouds: Vec<PointCloud>,
    /// Reported world sensor poses (perturbed by injectors).
    pub poses: Vec<Pose>,
    pub gt_boxes: Vec<GtBox>,
}

/// Render every agent at time `t` and express labels in the frame of
/// `ego_index`.
pub fn render_frame(scenario: &Scenario, t: f64, ego_index: usize) -> Result<Frame, SimError> {
    render_frame_at_times(scenario, t, ego_index, |_| t)
}

fn render_frame_at_times(
    scenario: &Scenario,
    label_time: f64,
    ego_index: usize,
    capture_time: impl Fn(usize) -> f64,
) -> Result<Frame, SimError> {
    if !(0.0..=scenario.config.duration).contains(&label_time) {
        return Err(SimError::InvalidTime { t: label_time, duration: scenario.config.duration });
    }
    if ego_index >= scenario.agents.len() {
        return Err(SimError::BadAgentIndex { index: ego_index, agents: scenario.agents.len() });
    }
    let mut clouds = Vec::with_capacity(scenario.agents.len());
    let mut poses = Vec::with_capacity(scenario.agents.len());
    let mut hits_per_object = vec![0usize; scenario.objects.len()];
    for (i, spec) in scenario.agents.iter().enumerate() {
        let t_i = capture_time(i);
        if t_i < 0.0 {
            return Err(SimError::NegativeCaptureTime { t: t_i });
        }
        let boxes: Vec<Box3D> = scenario.objects.iter().map(|o| o.box_at(t_i)).collect();
        let pose = scenario.sensor_pose(i, t_i);
        let mut rng = rng_for(scenario.config.seed, &format!("ray/{}/{}", t_i.to_bits(), i));
        let (mut cloud, hits) = raycast::raycast_with_hits(&boxes, &pose, &spec.sensor, &mut rng);
        cloud = PointCloud::from_parts(cloud.points().to_vec(), vec![i as u32; cloud.len()]);
        for (h, sum) in hits.iter().zip(hits_per_object.iter_mut()) {
            *sum += h;
        }
        clouds.push(cloud);
        poses.push(pose);
    }
    let ego_inv = crate::geometry::pose_inverse(&scenario.sensor_pose(ego_index, label_time));
    let gt_boxes = scenario
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let world = o.box_at(label_time);
            let center = ego_inv.transform_point(world.center);
            let bbox = Box3D::new(center, world.length, world.width, world.height, world.yaw + ego_inv.yaw());
            GtBox { object_id: o.id, class: o.class, bbox, observed: hits_per_object[k] > 0 }
        })
        .collect();
    Ok(Frame { time: label_time, ego_index, clouds, poses, gt_boxes })
}

/// Perturb each cooperative agent's reported pose with Gaussian noise
/// in x, y and yaw. Ego pose, clouds, and labels stay untouched.
pub fn inject_localization_error(
    frame: &Frame,
    sigma_xy: f64,
    sigma_yaw: f64,
    rng: &mut impl rand::Rng,
) -> Result<Frame, SimError> {
    if sigma_xy < 0.0 || sigma_yaw < 0.0 {
        return Err(SimError::InvalidConfig("noise sigmas must be >= 0".into()));
    }
    let mut out = frame.clone();
    for (i, pose) in out.poses.iter_mut().enumerate() {
        if i == frame.ego_index {
            continue;
        }
        if sigma_xy > 0.0 {
            let n = Normal::new(0.0, sigma_xy).expect("validated sigma");
            pose.translation.x += n.sample(rng);
            pose.translation.y += n.sample(rng);
        }
        if sigma_yaw > 0.0 {
            let n = Normal::new(0.0, sigma_yaw).expect("validated sigma");
            pose.rotation = Mat3::rotation_z(n.sample(rng)).mul(pose.rotation);
        }
    }
    Ok(out)
}

/// Ego rendered at `t`, cooperative agents (clouds and reported poses)
/// at `t - delay`; labels at `t`.
pub fn inject_time_delay(
    scenario: &Scenario,
    t: f64,
    delay: f64,
    ego_index: usize,
) -> Result<Frame, SimError> {
    if delay < 0.0 {
        return Err(SimError::InvalidConfig("delay must be >= 0".into()));
    }
    if t - delay < 0.0 {
        return Err(SimError::NegativeCaptureTime { t: t - delay });
    }
    render_frame_at_times(scenario, t, ego_index, |agent| if agent == ego_index { t } else { t - delay })
}

#[cfg(test)]
mod tests;
