use super::*;
use crate::geometry::{pose_inverse, transform_points, Box3D, Vec3};
use crate::seed::rng_for;

fn sensor(max_range: f64) -> SensorConfig {
    SensorConfig {
        mount_height: 1.8,
        elevation_angles: (0..8).map(|i| -0.35 + 0.05 * i as f64).collect(),
        azimuth_step: 0.05,
        max_range,
        dropout_prob: 0.0,
    }
}

fn default_cfg(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_coop_agents: 2,
        n_objects: 6,
        area_bounds: 60.0,
        duration: 1.0,
        frame_rate: 10.0,
        scenario_family: ScenarioFamily::Intersection,
        seed,
        truck_fraction: 0.2,
    }
}

fn build(seed: u64) -> Scenario {
    generate_scenario(&default_cfg(seed), &sensor(60.0), &sensor(100.0)).unwrap()
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(build(11), build(11));
    assert_ne!(build(11), build(12));
}

#[test]
fn no_objects_means_only_ground_returns() {
    let cfg = ScenarioConfig { n_objects: 0, ..default_cfg(3) };
    let scenario = generate_scenario(&cfg, &sensor(60.0), &sensor(100.0)).unwrap();
    let frame = render_frame(&scenario, 0.2, 0).unwrap();
    for (cloud, pose) in frame.clouds.iter().zip(&frame.poses) {
        let world = transform_points(pose, cloud);
        for p in world.points() {
            assert!(p.z.abs() < 1e-9, "non-ground return at z = {}", p.z);
        }
    }
}

#[test]
fn zero_coop_agents_yields_single_agent_frames() {
    let cfg = ScenarioConfig { n_coop_agents: 0, ..default_cfg(4) };
    let scenario = generate_scenario(&cfg, &sensor(60.0), &sensor(100.0)).unwrap();
    assert_eq!(scenario.agents.len(), 1);
    let frame = render_frame(&scenario, 0.0, 0).unwrap();
    assert_eq!(frame.clouds.len(), 1);
}

#[test]
fn placement_failure_is_an_explicit_error() {
    let cfg = ScenarioConfig { n_objects: 60, area_bounds: 8.0, ..default_cfg(5) };
    let err = generate_scenario(&cfg, &sensor(60.0), &sensor(100.0)).unwrap_err();
    assert!(matches!(err, SimError::Placement { .. }));
}

#[test]
fn single_ray_hits_cube_near_face() {
    // Unit cube centered 10 m ahead: the near face is at 9.5 m.
    let bbox = Box3D::new(Vec3::new(10.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0);
    let ray = Ray { origin: Vec3::ZERO, direction: Vec3::new(1.0, 0.0, 0.0) };
    let t = ray_box_intersect(&ray, &bbox).unwrap();
    assert!((t - 9.5).abs() < 1e-12, "t = {t}");

    // One-channel horizontal sensor pointing the same way.
    let cfg = SensorConfig {
        mount_height: 0.0,
        elevation_angles: vec![0.0],
        azimuth_step: 6.0, // only azimuth 0 fits in a full turn
        max_range: 50.0,
        dropout_prob: 0.0,
    };
    let mut rng = rng_for(0, "ray");
    let cloud = raycast_lidar(&[bbox], &crate::geometry::Pose::IDENTITY, &cfg, &mut rng);
    assert_eq!(cloud.len(), 1);
    assert!((cloud.points()[0].x - 9.5).abs() < 1e-12);
}

#[test]
fn upward_ray_returns_nothing() {
    let cfg = SensorConfig {
        mount_height: 0.0,
        elevation_angles: vec![std::f64::consts::FRAC_PI_2],
        azimuth_step: 6.0,
        max_range: 100.0,
        dropout_prob: 0.0,
    };
    let mut rng = rng_for(0, "up");
    let pose = crate::geometry::Pose::from_yaw_translation(0.0, Vec3::new(0.0, 0.0, 2.0));
    let cloud = raycast_lidar(&[], &pose, &cfg, &mut rng);
    assert!(cloud.is_empty());
}

#[test]
fn full_dropout_empties_the_cloud() {
    let mut cfg = sensor(60.0);
    cfg.dropout_prob = 1.0;
    let mut rng = rng_for(0, "drop");
    let pose = crate::geometry::Pose::from_yaw_translation(0.0, Vec3::new(0.0, 0.0, 1.8));
    let cloud = raycast_lidar(&[], &pose, &cfg, &mut rng);
    assert!(cloud.is_empty());
}

#[test]
fn returns_respect_max_range_and_lie_on_surfaces() {
    let scenario = build(21);
    let frame = render_frame(&scenario, 0.5, 0).unwrap();
    for (i, (cloud, pose)) in frame.clouds.iter().zip(&frame.poses).enumerate() {
        let max_range = scenario.agents[i].sensor.max_range;
        let boxes: Vec<Box3D> = scenario.objects.iter().map(|o| o.box_at(0.5)).collect();
        let world = transform_points(pose, cloud);
        for (local, w) in cloud.points().iter().zip(world.points()) {
            assert!(local.norm() <= max_range + 1e-9);
            let on_ground = w.z.abs() < 1e-6;
            if !on_ground {
                let d = boxes.iter().map(|b| b.surface_distance(*w)).fold(f64::INFINITY, f64::min);
                assert!(d < 1e-6, "return {d} m off every box surface");
            }
        }
    }
}

#[test]
fn rendering_is_deterministic_and_ego_choice_only_relabels() {
    let scenario = build(31);
    let a = render_frame(&scenario, 0.3, 0).unwrap();
    let b = render_frame(&scenario, 0.3, 0).unwrap();
    assert_eq!(a, b);
    let c = render_frame(&scenario, 0.3, 1).unwrap();
    assert_eq!(a.clouds, c.clouds);
    assert_eq!(a.poses, c.poses);
    assert_ne!(a.gt_boxes, c.gt_boxes); // same world, different label frame
    // Same world content: box sizes and observation flags agree.
    for (x, y) in a.gt_boxes.iter().zip(&c.gt_boxes) {
        assert_eq!(x.observed, y.observed);
        assert_eq!(x.bbox.length, y.bbox.length);
    }
}

#[test]
fn object_seen_only_by_infrastructure_is_observed() {
    let near = sensor(12.0);
    let far = sensor(100.0);
    let scenario = Scenario {
        config: default_cfg(1),
        agents: vec![
            AgentSpec { kind: AgentKind::Vehicle, sensor: near, trajectory: Trajectory::fixed(Vec3::ZERO, 0.0) },
            AgentSpec {
                kind: AgentKind::Infrastructure,
                sensor: far,
                trajectory: Trajectory::fixed(Vec3::new(40.0, 0.0, 0.0), 0.0),
            },
        ],
        objects: vec![SceneObject {
            id: 0,
            class: ObjectClass::Car,
            size: (4.5, 1.9, 1.6),
            trajectory: Trajectory::fixed(Vec3::new(50.0, 0.0, 0.0), 0.0),
        }],
    };
    let frame = render_frame(&scenario, 0.1, 0).unwrap();
    assert!(frame.gt_boxes[0].observed);
    let infra_world = transform_points(&frame.poses[1], &frame.clouds[1]);
    let bbox = scenario.objects[0].box_at(0.1);
    let on_box = infra_world.points().iter().filter(|p| bbox.surface_distance(**p) < 1e-6).count();
    assert!(on_box > 0, "infrastructure cloud should contain object returns");
    // The ego (12 m range) cannot reach it.
    let ego_world = transform_points(&frame.poses[0], &frame.clouds[0]);
    assert!(ego_world.points().iter().all(|p| bbox.surface_distance(*p) > 1.0));
}

#[test]
fn ego_cloud_is_near_its_own_origin() {
    let scenario = build(41);
    let frame = render_frame(&scenario, 0.0, 0).unwrap();
    let ego_cloud = &frame.clouds[0];
    let max_range = scenario.agents[0].sensor.max_range;
    assert!(ego_cloud.points().iter().all(|p| p.norm() <= max_range + 1e-9));
}

#[test]
fn localization_noise_zero_sigma_is_identity() {
    let scenario = build(51);
    let frame = render_frame(&scenario, 0.2, 0).unwrap();
    let mut rng = rng_for(1, "loc");
    let noisy = inject_localization_error(&frame, 0.0, 0.0, &mut rng).unwrap();
    assert_eq!(noisy, frame);
}

#[test]
fn localization_noise_leaves_ego_and_labels_alone() {
    let scenario = build(52);
    let frame = render_frame(&scenario, 0.2, 0).unwrap();
    let mut rng = rng_for(2, "loc");
    let noisy = inject_localization_error(&frame, 0.5, 0.05, &mut rng).unwrap();
    assert_eq!(noisy.poses[0], frame.poses[0]);
    assert_eq!(noisy.gt_boxes, frame.gt_boxes);
    assert_eq!(noisy.clouds, frame.clouds);
    assert_ne!(noisy.poses[1], frame.poses[1]);
}

#[test]
fn localization_noise_magnitude_matches_rayleigh_mean() {
    // |dxy| over both axes is Rayleigh(sigma); its mean is
    // sigma * sqrt(pi/2).
    let scenario = build(53);
    let frame = render_frame(&scenario, 0.2, 0).unwrap();
    let sigma = 0.5;
    let mut rng = rng_for(3, "loc-mc");
    let mut sum = 0.0;
    let draws = 10_000;
    for _ in 0..draws {
        let noisy = inject_localization_error(&frame, sigma, 0.0, &mut rng).unwrap();
        let d = noisy.poses[1].translation.sub(frame.poses[1].translation);
        sum += (d.x * d.x + d.y * d.y).sqrt();
    }
    let mean = sum / draws as f64;
    let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean - expected).abs() / expected < 0.02, "mean {mean} vs {expected}");
}

#[test]
fn zero_delay_equals_plain_render() {
    let scenario = build(61);
    let a = render_frame(&scenario, 0.5, 0).unwrap();
    let b = inject_time_delay(&scenario, 0.5, 0.0, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn static_scene_is_delay_invariant() {
    let cfg = default_cfg(62);
    let mut scenario = build(62);
    for agent in &mut scenario.agents {
        let w = agent.trajectory.waypoints[0];
        agent.trajectory = Trajectory::fixed(w.position, w.yaw);
    }
    for object in &mut scenario.objects {
        let w = object.trajectory.waypoints[0];
        object.trajectory = Trajectory::fixed(w.position, w.yaw);
    }
    let _ = cfg;
    let a = render_frame(&scenario, 0.8, 0).unwrap();
    let b = inject_time_delay(&scenario, 0.8, 0.5, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn delay_displaces_cooperative_views_by_speed_times_delay() {
    let cfg = ScenarioConfig { duration: 2.0, ..default_cfg(63) };
    let speed = 10.0;
    let scenario = Scenario {
        config: cfg,
        agents: vec![
            AgentSpec {
                kind: AgentKind::Vehicle,
                sensor: sensor(80.0),
                trajectory: Trajectory::fixed(Vec3::new(-20.0, 0.0, 0.0), 0.0),
            },
            AgentSpec {
                kind: AgentKind::Vehicle,
                sensor: sensor(80.0),
                trajectory: Trajectory::fixed(Vec3::new(20.0, 0.0, 0.0), std::f64::consts::PI),
            },
        ],
        objects: vec![SceneObject {
            id: 0,
            class: ObjectClass::Car,
            size: (4.5, 1.9, 1.6),
            trajectory: Trajectory {
                waypoints: vec![
                    Waypoint { time: 0.0, position: Vec3::new(-10.0, 6.0, 0.0), yaw: 0.0 },
                    Waypoint { time: 2.0, position: Vec3::new(-10.0 + speed * 2.0, 6.0, 0.0), yaw: 0.0 },
                ],
            },
        }],
    };
    let (t, delay) = (1.0, 0.1);
    let frame = inject_time_delay(&scenario, t, delay, 0).unwrap();
    let box_now = scenario.objects[0].box_at(t);
    let box_then = scenario.objects[0].box_at(t - delay);
    let displacement = box_now.center.sub(box_then.center).norm();
    assert!((displacement - speed * delay).abs() < 1e-9, "displacement {displacement}");
    // Cooperative returns sit on the delayed box, 1 m behind the label.
    let coop_world = transform_points(&frame.poses[1], &frame.clouds[1]);
    let coop_on_old: Vec<&Vec3> =
        coop_world.points().iter().filter(|p| box_then.surface_distance(**p) < 1e-6).collect();
    assert!(!coop_on_old.is_empty());
    // Labels are still at time t in the ego frame.
    let ego_inv = pose_inverse(&scenario.sensor_pose(0, t));
    let label = frame.gt_boxes[0].bbox.center;
    let expected = ego_inv.transform_point(box_now.center);
    assert!((label.sub(expected)).norm() < 1e-9);
}

#[test]
fn delay_into_negative_time_is_an_error() {
    let scenario = build(64);
    assert!(matches!(
        inject_time_delay(&scenario, 0.05, 0.2, 0),
        Err(SimError::NegativeCaptureTime { .. })
    ));
}

#[test]
fn invalid_render_time_is_an_error() {
    let scenario = build(65);
    assert!(matches!(render_frame(&scenario, 99.0, 0), Err(SimError::InvalidTime { .. })));
}
