//! Experiment configuration.
//!
//! One TOML file configures grid geometry, sensor model, visual memory,
//! reward shaping, the scenario, and the cross-entropy-method trainer. Every
//! key is optional; omitted keys take the defaults below, so an empty file is
//! a valid configuration.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Whole experiment configuration; every section has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub sensor: SensorConfig,
    pub memory: MemoryConfig,
    pub reward: RewardConfig,
    pub scenario: ScenarioConfig,
    pub episode: EpisodeConfig,
    pub cem: CemConfig,
}

/// Grid geometry: cell counts and resolution. The ego-vehicle center sits in
/// the middle of the bottom row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub meters_per_cell: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            height: crate::grid::DEFAULT_HEIGHT,
            width: crate::grid::DEFAULT_WIDTH,
            meters_per_cell: crate::grid::DEFAULT_METERS_PER_CELL,
        }
    }
}

impl GridConfig {
    pub fn ego_cell(&self) -> (usize, usize) {
        (self.height - 1, self.width / 2)
    }
}

/// Perception model: field of view, range, and sensor noise discount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub fov_deg: f64,
    pub max_range_m: f64,
    /// Discount applied to rendered cells; 0.99 leaves 0.01 on ignorance.
    pub noise_discount: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { fov_deg: 135.0, max_range_m: 40.0, noise_discount: 0.99 }
    }
}

/// Visual-memory ageing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub age_gamma: f64,
    pub max_age_steps: u32,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { age_gamma: 0.9, max_age_steps: 20 }
    }
}

/// Reward-shaping parameters. `r_obj_per_m2` are per-square-meter class
/// rewards; they are scaled by cell area and normalized by their maximum to
/// obtain the per-cell rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub eta: f64,
    pub k_min_cells: u32,
    pub w_exp: f64,
    pub r_obj_per_m2: [f64; 5],
    pub penalty: f64,
    pub alpha: f64,
    pub beta_f: f64,
    pub beta_l: f64,
    pub zeta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            // Pedestrian and car densities spread a fixed object reward over
            // the object footprint (0.7x1.6 m and 3.0x1.8 m).
            r_obj_per_m2: [540.0 / (0.7 * 1.6), 540.0 / (3.0 * 1.8), 20.0, 20.0, 0.0],
            eta: 0.3,
            k_min_cells: 36,
            w_exp: 2.0,
            penalty: -15.0,
            alpha: 0.5,
            beta_f: 0.8,
            beta_l: 1.0,
            zeta: 0.01,
        }
    }
}

/// Scenario layout and agent population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Layout template: `default`, `zero-agents`, or `crossing`.
    pub template: String,
    pub cars: usize,
    pub pedestrians: usize,
    pub car_speed_mps: f64,
    pub ego_speed_mps: f64,
    /// Upper bound on a pedestrian step per tick, meters.
    pub pedestrian_step_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            template: "default".to_string(),
            cars: 4,
            pedestrians: 6,
            car_speed_mps: 8.0,
            ego_speed_mps: 6.0,
            pedestrian_step_m: 0.15,
        }
    }
}

/// Episode length defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

/// Cross-entropy-method trainer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub generations: usize,
    /// Episodes averaged per candidate evaluation.
    pub episodes_per_eval: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { population: 32, elite_fraction: 0.25, generations: 20, episodes_per_eval: 4 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reward;
        if !(0.0..=1.0).contains(&r.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", r.eta)));
        }
        if r.w_exp.is_nan() || r.w_exp <= 0.0 {
            return Err(Error::Config(format!("w_exp {} must be positive", r.w_exp)));
        }
        if !(0.0..1.0).contains(&r.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1)", r.alpha)));
        }
        if !(0.0..=1.0).contains(&r.beta_f) || !(0.0..=1.0).contains(&r.beta_l) {
            return Err(Error::Config("beta_f and beta_l must lie in [0, 1]".into()));
        }
        if r.zeta.is_nan() || r.zeta <= 0.0 || r.zeta > 1.0 {
            return Err(Error::Config(format!("zeta {} outside (0, 1]", r.zeta)));
        }
        for (k, &v) in r.r_obj_per_m2.iter().enumerate() {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("r_obj_per_m2[{k}] = {v} must be >= 0")));
            }
        }
        if r.r_obj_per_m2.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("r_obj_per_m2 must have a positive entry".into()));
        }
        if self.grid.height == 0 || self.grid.width == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.grid.meters_per_cell.is_nan() || self.grid.meters_per_cell <= 0.0 {
            return Err(Error::Config("meters_per_cell must be positive".into()));
        }
        if self.sensor.fov_deg.is_nan() || self.sensor.fov_deg <= 0.0 || self.sensor.fov_deg > 360.0 {
            return Err(Error::Config(format!("fov_deg {} outside (0, 360]", self.sensor.fov_deg)));
        }
        if self.sensor.max_range_m.is_nan() || self.sensor.max_range_m <= 0.0 {
            return Err(Error::Config("max_range_m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sensor.noise_discount) {
            return Err(Error::Config("noise_discount outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.memory.age_gamma) {
            return Err(Error::Config("age_gamma outside [0, 1]".into()));
        }
        if self.episode.steps == 0 {
            return Err(Error::Config("episode steps must be positive".into()));
        }
        if !(0.0 < self.cem.elite_fraction && self.cem.elite_fraction <= 1.0) {
            return Err(Error::Config("elite_fraction outside (0, 1]".into()));
        }
        if self.cem.population == 0 || self.cem.episodes_per_eval == 0 {
            return Err(Error::Config("cem population and episodes_per_eval must be positive".into()));
        }
        match self.scenario.template.as_str() {
            "default" | "zero-agents" | "crossing" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario template `{other}` (expected default, zero-agents, or crossing)"
                )))
            }
        }
        Ok(())
    }
}
