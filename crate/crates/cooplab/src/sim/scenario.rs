//! Scenario synthesis: road-aligned agents and objects with straight or
//! gently turning constant-speed tracks.

use rand::Rng;

use crate::geometry::Vec3;
use crate::seed::rng_for;

use super::{
    AgentKind, AgentSpec, ObjectClass, Scenario, ScenarioConfig, ScenarioFamily, SceneObject, SensorConfig,
    SimError, Trajectory, Waypoint,
};

const LANES: [f64; 4] = [-5.25, -1.75, 1.75, 5.25];
const CAR_SIZE: (f64, f64, f64) = (4.5, 1.9, 1.6);
const TRUCK_SIZE: (f64, f64, f64) = (8.0, 2.5, 3.2);
const PLACEMENT_ATTEMPTS: usize = 1000;

fn straight(start: Vec3, yaw: f64, speed: f64, duration: f64) -> Trajectory {
    let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    Trajectory {
        waypoints: vec![
            Waypoint { time: 0.0, position: start, yaw },
            Waypoint { time: duration, position: start.add(dir.scale(speed * duration)), yaw },
        ],
    }
}

fn arc(start: Vec3, yaw0: f64, speed: f64, yaw_rate: f64, duration: f64) -> Trajectory {
    let dt = 0.2;
    let mut waypoints = Vec::new();
    let mut pos = start;
    let mut yaw = yaw0;
    let mut t = 0.0;
    loop {
        waypoints.push(Waypoint { time: t, position: pos, yaw });
        if t >= duration {
            break;
        }
        let step = if t + dt >= duration { duration - t } else { dt };
        pos = pos.add(Vec3::new(yaw.cos(), yaw.sin(), 0.0).scale(speed * step));
        yaw += yaw_rate * step;
        t = if t + dt >= duration { duration } else { t + dt };
    }
    Trajectory { waypoints }
}

struct Footprint {
    x: f64,
    y: f64,
    radius: f64,
}

fn overlaps(placed: &[Footprint], x: f64, y: f64, radius: f64) -> bool {
    placed.iter().any(|f| {
        let d = ((f.x - x).powi(2) + (f.y - y).powi(2)).sqrt();
        d < f.radius + radius + 0.5
    })
}

fn footprint_radius(size: (f64, f64, f64)) -> f64 {
    0.5 * (size.0 * size.0 + size.1 * size.1).sqrt()
}

/// Build agents and objects for one scenario. Deterministic in the
/// config seed; fails if an object cannot be placed without overlap.
pub fn generate_scenario(
    cfg: &ScenarioConfig,
    vehicle_sensor: &SensorConfig,
    infra_sensor: &SensorConfig,
) -> Result<Scenario, SimError> {
    cfg.validate()?;
    vehicle_sensor.validate()?;
    infra_sensor.validate()?;
    let mut rng = rng_for(cfg.seed, "scenario");
    let bounds = cfg.area_bounds;
    let mut placed: Vec<Footprint> = Vec::new();
    let mut agents = Vec::with_capacity(cfg.n_coop_agents + 1);

    // Ego vehicle enters on the x road.
    let ego_start = Vec3::new(-0.45 * bounds, -1.75, 0.0);
    let ego_speed = rng.gen_range(5.0..9.0);
    agents.push(AgentSpec {
        kind: AgentKind::Vehicle,
        sensor: vehicle_sensor.clone(),
        trajectory: straight(ego_start, 0.0, ego_speed, cfg.duration),
    });
    placed.push(Footprint { x: ego_start.x, y: ego_start.y, radius: footprint_radius(CAR_SIZE) });

    let mut coop_vehicle_index = 0usize;
    for coop in 0..cfg.n_coop_agents {
        let is_infra = cfg.scenario_family == ScenarioFamily::Intersection && coop == 0;
        if is_infra {
            let corner = (bounds / 2.0).min(12.0);
            agents.push(AgentSpec {
                kind: AgentKind::Infrastructure,
                sensor: infra_sensor.clone(),
                trajectory: Trajectory::fixed(Vec3::new(corner, corner, 0.0), -2.356),
            });
            continue;
        }
        let v = coop_vehicle_index;
        coop_vehicle_index += 1;
        let speed = rng.gen_range(5.0..9.0);
        let (start, yaw) = match cfg.scenario_family {
            ScenarioFamily::Corridor => {
                let lane = LANES[v % LANES.len()];
                let x = -0.45 * bounds + 18.0 * (v + 1) as f64 + rng.gen_range(-3.0..3.0);
                (Vec3::new(x, lane, 0.0), 0.0)
            }
            ScenarioFamily::Intersection => match v % 3 {
                0 => (Vec3::new(1.75, -0.45 * bounds + rng.gen_range(-4.0..4.0), 0.0), std::f64::consts::FRAC_PI_2),
                1 => (Vec3::new(0.45 * bounds + rng.gen_range(-4.0..4.0), 1.75, 0.0), std::f64::consts::PI),
                _ => (Vec3::new(-1.75, 0.45 * bounds + rng.gen_range(-4.0..4.0), 0.0), -std::f64::consts::FRAC_PI_2),
            },
        };
        agents.push(AgentSpec {
            kind: AgentKind::Vehicle,
            sensor: vehicle_sensor.clone(),
            trajectory: straight(start, yaw, speed, cfg.duration),
        });
        placed.push(Footprint { x: start.x, y: start.y, radius: footprint_radius(CAR_SIZE) });
    }

    let mut objects = Vec::with_capacity(cfg.n_objects);
    for id in 0..cfg.n_objects {
        let mut accepted = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = if rng.gen::<f64>() < cfg.truck_fraction { ObjectClass::Truck } else { ObjectClass::Car };
            let base = match class {
                ObjectClass::Car => CAR_SIZE,
                ObjectClass::Truck => TRUCK_SIZE,
            };
            let jitter = rng.gen_range(0.9..1.1);
            let size = (base.0 * jitter, base.1 * jitter, base.2 * rng.gen_range(0.9..1.1));
            let on_x_road = match cfg.scenario_family {
                ScenarioFamily::Corridor => true,
                ScenarioFamily::Intersection => rng.gen::<bool>(),
            };
            let lane = LANES[rng.gen_range(0..LANES.len())];
            let s = rng.gen_range(-bounds..bounds);
            let forward: bool = rng.gen();
            let (start, yaw) = if on_x_road {
                (Vec3::new(s, lane, 0.0), if forward { 0.0 } else { std::f64::consts::PI })
            } else {
                (
                    Vec3::new(lane, s, 0.0),
                    if forward { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 },
                )
            };
            let radius = footprint_radius(size);
            if overlaps(&placed, start.x, start.y, radius) {
                continue;
            }
            let speed = rng.gen_range(0.0..12.0);
            let turning = cfg.scenario_family == ScenarioFamily::Intersection && rng.gen::<f64>() < 0.3;
            let trajectory = if turning {
                let rate = rng.gen_range(0.05..0.2) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                arc(start, yaw, speed, rate, cfg.duration)
            } else {
                straight(start, yaw, speed, cfg.duration)
            };
            placed.push(Footprint { x: start.x, y: start.y, radius });
            accepted = Some(SceneObject { id: id as u32, class, size, trajectory });
            break;
        }
        match accepted {
            Some(o) => objects.push(o),
            None => return Err(SimError::Placement { object: id, attempts: PLACEMENT_ATTEMPTS }),
        }
    }

    Ok(Scenario { config: cfg.clone(), agents, objects })
}
