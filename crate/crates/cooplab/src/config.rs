//! Run configuration: a flat TOML file with strict validation. Every
//! field has a default, unknown keys are rejected, and the resolved
//! config is echoed verbatim into every output artifact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::BevSpec;
use crate::eval::{DetectConfig, FinetuneConfig};
use crate::fusion::CropBounds;
use crate::geometry::AugmentRanges;
use crate::pretrain::{EncoderConfig, PretrainConfig};
use crate::seed::child_seed;
use crate::sim::{ScenarioConfig, ScenarioFamily, SensorConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Scenario knobs (the per-scenario seed is derived from the root
/// seed, so it does not appear here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub family: ScenarioFamily,
    pub n_coop_agents: usize,
    pub n_objects: usize,
    pub area_bounds: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub truck_fraction: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            family: ScenarioFamily::Intersection,
            n_coop_agents: 2,
            n_objects: 10,
            area_bounds: 80.0,
            duration: 3.2,
            frame_rate: 10.0,
            truck_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_scenarios: usize,
    /// Scenario-level split fractions (train, val, test).
    pub split: (f64, f64, f64),
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams { n_scenarios: 10, split: (0.7, 0.1, 0.2) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { x: [-70.4, 70.4], y: [-70.4, 70.4], z: [-3.0, 5.0] }
    }
}

impl CropParams {
    pub fn bounds(&self) -> CropBounds {
        CropBounds {
            x_min: self.x[0],
            x_max: self.x[1],
            y_min: self.y[0],
            y_max: self.y[1],
            z_min: self.z[0],
            z_max: self.z[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevParams {
    /// Grid side in meters; counts derive from the crop extent.
    pub cell: f64,
}

impl Default for BevParams {
    fn default() -> Self {
        BevParams { cell: 0.8 }
    }
}

/// Builds one sensor model; angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorPreset {
    pub mount_height: f64,
    pub channels: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub azimuth_step: f64,
    pub max_range: f64,
    pub dropout_prob: f64,
}

impl SensorPreset {
    pub fn vehicle_default() -> SensorPreset {
        SensorPreset {
            mount_height: 1.8,
            channels: 32,
            elevation_min: -25f64.to_radians(),
            elevation_max: 5f64.to_radians(),
            azimuth_step: 0.025,
            max_range: 60.0,
            dropout_prob: 0.02,
        }
    }

    pub fn infrastructure_default() -> SensorPreset {
        SensorPreset {
            mount_height: 5.0,
            channels: 32,
            elevation_min: -45f64.to_radians(),
            elevation_max: 0.0,
            azimuth_step: 0.025,
            max_range: 100.0,
            dropout_prob: 0.02,
        }
    }

    pub fn build(&self) -> SensorConfig {
        SensorConfig {
            mount_height: self.mount_height,
            elevation_angles: Vec::new(),
            azimuth_step: self.azimuth_step,
            max_range: self.max_range,
            dropout_prob: self.dropout_prob,
        }
        .with_elevation_span(self.elevation_min, self.elevation_max, self.channels.max(1))
    }
}

impl Default for SensorPreset {
    fn default() -> Self {
        SensorPreset::vehicle_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorsParams {
    pub vehicle: SensorPreset,
    pub infrastructure: SensorPreset,
}

impl Default for SensorsParams {
    fn default() -> Self {
        SensorsParams {
            vehicle: SensorPreset::vehicle_default(),
            infrastructure: SensorPreset::infrastructure_default(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioParams,
    pub dataset: DatasetParams,
    pub crop: CropParams,
    pub bev: BevParams,
    pub sensors: SensorsParams,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub augment: AugmentRanges,
    pub detect: DetectConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Every field checked; cross-field constraints included.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.bev_spec().map_err(|e| invalid(e.to_string()))?;
        self.crop.bounds().validate().map_err(|e| invalid(e.to_string()))?;
        self.scenario_config(0).validate().map_err(|e| invalid(e.to_string()))?;
        self.sensors.vehicle.build().validate().map_err(|e| invalid(e.to_string()))?;
        self.sensors.infrastructure.build().validate().map_err(|e| invalid(e.to_string()))?;
        self.encoder.validate().map_err(|e| invalid(e.to_string()))?;
        self.pretrain.validate().map_err(|e| invalid(e.to_string()))?;
        self.finetune.validate().map_err(|e| invalid(e.to_string()))?;
        self.augment.validate().map_err(|e| invalid(e.to_string()))?;
        self.detect.validate().map_err(|e| invalid(e.to_string()))?;
        if self.dataset.n_scenarios == 0 {
            return Err(invalid("dataset.n_scenarios must be >= 1".into()));
        }
        let (a, b, c) = self.dataset.split;
        if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(invalid("dataset.split fractions must be positive and sum to 1".into()));
        }
        Ok(())
    }

    /// The BEV plane over the configured crop.
    pub fn bev_spec(&self) -> Result<BevSpec, crate::bev::BevError> {
        BevSpec::new(self.crop.x[0], self.crop.x[1], self.crop.y[0], self.crop.y[1], self.bev.cell)
    }

    /// Scenario config for scenario index `i`; its seed is derived from
    /// the root seed.
    pub fn scenario_config(&self, index: usize) -> ScenarioConfig {
        ScenarioConfig {
            n_coop_agents: self.scenario.n_coop_agents,
            n_objects: self.scenario.n_objects,
            area_bounds: self.scenario.area_bounds,
            duration: self.scenario.duration,
            frame_rate: self.scenario.frame_rate,
            scenario_family: self.scenario.family,
            seed: child_seed(self.seed, &format!("simulate/scenario/{index}")),
            truck_fraction: self.scenario.truck_fraction,
        }
    }

    /// Resolved config as JSON, for echoing into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Pretrain config with the seed bound to the root seed.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { seed: child_seed(self.seed, "pretrain"), ..self.pretrain }
    }
}
