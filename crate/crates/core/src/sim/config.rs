//! Run configuration, read from a TOML file with one section per block:
//! `[farm]`, `[control_model]`, `[control]`, `[plant]`, `[reference]` and
//! `[simulation]`. Only `[farm]` is required; other sections default to the
//! 10-turbine case.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobi::{ControlMode, ControllerConfig, JacobiConfig};
use crate::linear::TuningConstants;
use crate::plant::{InductionMap, PlantParams, BETZ_CT};
use crate::qp::CostWeights;
use crate::topology::FarmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlModelConfig {
    pub wake_constant: f64,
    #[serde(default = "default_tau")]
    pub filter_time_constant: f64,
    #[serde(default = "one")]
    pub c_vv: f64,
    #[serde(default = "one")]
    pub c_vct: f64,
    #[serde(default = "one")]
    pub c_va: f64,
    #[serde(default = "one")]
    pub c_pv: f64,
    #[serde(default = "one")]
    pub c_pct: f64,
    /// Thrust coefficients of the linearization point: one value for all
    /// turbines or one per turbine.
    #[serde(default = "default_point")]
    pub linearization_ct: PointSpec,
    #[serde(default = "default_state_budget")]
    pub state_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Uniform(f64),
    PerTurbine(Vec<f64>),
}

impl PointSpec {
    pub fn resolve(&self, turbines: usize) -> Result<Vec<f64>> {
        match self {
            PointSpec::Uniform(c) => Ok(vec![*c; turbines]),
            PointSpec::PerTurbine(v) if v.len() == turbines => Ok(v.clone()),
            PointSpec::PerTurbine(v) => Err(Error::validation(
                "linearization_ct",
                format!("{} values for {turbines} turbines", v.len()),
            )),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    5.0
}
fn default_point() -> PointSpec {
    PointSpec::Uniform(0.6)
}
fn default_state_budget() -> usize {
    4096
}

impl ControlModelConfig {
    pub fn constants(&self) -> TuningConstants {
        TuningConstants {
            c_vv: self.c_vv,
            c_vct: self.c_vct,
            c_va: self.c_va,
            c_pv: self.c_pv,
            c_pct: self.c_pct,
        }
    }

    pub fn params(&self) -> PlantParams {
        PlantParams::new(self.wake_constant, self.filter_time_constant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_ct_min")]
    pub ct_min: f64,
    #[serde(default = "default_ct_max")]
    pub ct_max: f64,
    #[serde(default = "default_p_max")]
    pub max_iterations: usize,
    #[serde(default = "default_eps")]
    pub tolerance: f64,
    #[serde(default = "default_gamma_init")]
    pub init_scale: f64,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_mode")]
    pub mode: ControlMode,
    #[serde(default)]
    pub compare_centralized: bool,
    #[serde(default = "default_oracle_cap")]
    pub oracle_cap: usize,
}

fn default_horizon() -> usize {
    60
}
fn default_r() -> f64 {
    0.4
}
fn default_ct_min() -> f64 {
    0.01
}
fn default_ct_max() -> f64 {
    BETZ_CT
}
fn default_p_max() -> usize {
    200
}
fn default_eps() -> f64 {
    1e-2
}
fn default_gamma_init() -> f64 {
    10.0
}
fn default_workers() -> usize {
    1
}
fn default_mode() -> ControlMode {
    ControlMode::Distributed
}
fn default_oracle_cap() -> usize {
    2000
}

impl Default for ControlConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ControlConfig {
    pub fn controller(&self, state_budget: usize) -> ControllerConfig {
        ControllerConfig {
            horizon: self.horizon,
            weights: CostWeights { q: self.q, r: self.r },
            ct_min: self.ct_min,
            ct_max: self.ct_max,
            jacobi: JacobiConfig {
                max_iterations: self.max_iterations,
                tolerance: self.tolerance,
                init_scale: self.init_scale,
                weights: self.weights.clone(),
                warm_start: self.warm_start,
                workers: self.workers,
            },
            mode: self.mode,
            compare_centralized: self.compare_centralized,
            state_budget,
            oracle_cap: self.oracle_cap,
        }
    }
}

/// True plant parameters. Unset values copy the control model; the wake
/// constant can instead be given as a multiple of the model's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(default)]
    pub wake_constant: Option<f64>,
    #[serde(default)]
    pub wake_constant_scale: Option<f64>,
    #[serde(default)]
    pub filter_time_constant: Option<f64>,
    /// Fixed induction factor; the actuator-disk relation when absent.
    #[serde(default)]
    pub frozen_induction: Option<f64>,
    #[serde(default)]
    pub ct_min: Option<f64>,
    #[serde(default)]
    pub ct_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_base")]
    pub base: f64,
    /// File with one normalized value per line; synthetic when absent.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_gamma() -> f64 {
    0.25
}
fn default_base() -> f64 {
    0.8
}
fn default_seed() -> u64 {
    1
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCt {
    /// Uniform thrust coefficient.
    Uniform(f64),
    /// `"match_reference"`: the uniform value whose steady power equals the
    /// first reference sample.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_initial")]
    pub initial_ct: InitialCt,
}

fn default_samples() -> usize {
    1000
}
fn default_initial() -> InitialCt {
    InitialCt::Named("match_reference".into())
}

impl Default for SimulationConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub farm: FarmConfig,
    pub control_model: ControlModelConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

impl SimConfig {
    /// 2 x 5 farm with the 10-turbine model and control settings.
    pub fn ten_turbine() -> Self {
        SimConfig {
            farm: FarmConfig::ten_turbine(),
            control_model: ControlModelConfig {
                wake_constant: 0.68,
                filter_time_constant: 5.0,
                c_vv: 1.0,
                c_vct: 1.0,
                c_va: 0.9,
                c_pv: 1.0,
                c_pct: 1.1,
                linearization_ct: default_point(),
                state_budget: default_state_budget(),
            },
            control: ControlConfig::default(),
            plant: PlantConfig::default(),
            reference: ReferenceConfig::default(),
            simulation: SimulationConfig::default(),
        }
    }

    /// 8 x 8 farm with the 64-turbine model settings and `gamma = 0.5`.
    pub fn sixty_four_turbine() -> Self {
        let mut c = Self::ten_turbine();
        c.farm = FarmConfig::sixty_four_turbine();
        c.control_model = ControlModelConfig {
            wake_constant: 0.31,
            c_vv: 0.1,
            c_vct: 0.6,
            c_va: 0.8,
            c_pv: 0.9,
            c_pct: 1.1,
            ..c.control_model
        };
        c.reference.gamma = 0.5;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn plant_params(&self) -> PlantParams {
        let model = &self.control_model;
        let cw = match (self.plant.wake_constant, self.plant.wake_constant_scale) {
            (Some(cw), _) => cw,
            (None, Some(s)) => model.wake_constant * s,
            (None, None) => model.wake_constant,
        };
        let defaults = PlantParams::new(cw, 5.0);
        PlantParams {
            wake_constant: cw,
            filter_time_constant: self.plant.filter_time_constant.unwrap_or(model.filter_time_constant),
            induction: self
                .plant
                .frozen_induction
                .map_or(InductionMap::ActuatorDisk, InductionMap::Frozen),
            ct_min: self.plant.ct_min.unwrap_or(defaults.ct_min),
            ct_max: self.plant.ct_max.unwrap_or(defaults.ct_max),
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        self.control.controller(self.control_model.state_budget)
    }

    pub fn validate(&self) -> Result<()> {
        crate::topology::build_layout(&self.farm)?;
        self.control_model.params().validate()?;
        self.control_model.constants().validate()?;
        self.control_model
            .linearization_ct
            .resolve(self.farm.rows * self.farm.cols)?;
        let plant = self.plant_params();
        plant.validate()?;
        let ctrl = self.controller_config();
        ctrl.validate()?;
        ctrl.jacobi.validate(self.farm.rows * self.farm.cols)?;
        if self.plant.wake_constant.is_some() && self.plant.wake_constant_scale.is_some() {
            return Err(Error::validation("plant", "give wake_constant or wake_constant_scale, not both"));
        }
        if ctrl.ct_min < plant.ct_min || ctrl.ct_max > plant.ct_max {
            return Err(Error::validation("ct_max", "controller bounds must lie within the plant's"));
        }
        if !(self.reference.gamma >= 0.0) {
            return Err(Error::validation("gamma", "must be non-negative"));
        }
        if !(self.reference.base > 0.0) {
            return Err(Error::validation("base", "must be positive"));
        }
        if self.simulation.samples == 0 {
            return Err(Error::validation("samples", "must be positive"));
        }
        match &self.simulation.initial_ct {
            InitialCt::Uniform(c) if !(ctrl.ct_min..=ctrl.ct_max).contains(c) => {
                Err(Error::validation("initial_ct", format!("{c} is outside the controller bounds")))
            }
            InitialCt::Named(n) if n != "match_reference" => Err(Error::validation(
                "initial_ct",
                format!("expected a number or \"match_reference\", got {n:?}"),
            )),
            _ => Ok(()),
        }
    }
}
