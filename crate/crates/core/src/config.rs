//! Simulation configuration: a single TOML file with one section per
//! module. Every field has a default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{ControllerKind, ControllerSettings};
use crate::model::{DataCenter, DcId, FrequencyLadder, PhysicalMachine, PmId, UtilWeights, VirtualMachine};
use crate::power::{
    calibrate_multicore, CoolingParams, CubicPowerParams, MulticorePowerParams, PowerModel,
};
use crate::pricing::PricingParams;
use crate::traces::{
    fixed_prices, generate_workload, load_timeseries, load_workload, synthesize_prices,
    synthetic_base_prices, synthetic_temperatures, BetaSampler, BetaSource, SeriesKind, TraceError,
    TraceSet, WorkloadSpec,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn field_err(field: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.to_owned(),
        reason: reason.to_string(),
    }
}

// RNG stream ids, one per generator.
const STREAM_INVENTORY: u64 = 1;
const STREAM_WORKLOAD: u64 = 2;
const STREAM_PRICES: u64 = 3;
const STREAM_TEMPS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerModelKind {
    Cubic,
    Multicore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectricityMode {
    /// Constant annual mean per location.
    Fixed,
    /// Time-varying prices (from file or synthesized).
    Variable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    pub steps: usize,
    pub step_h: f64,
    pub seed: u64,
    pub controllers: Vec<ControllerKind>,
    pub power_model: PowerModelKind,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            steps: 168,
            step_h: 1.0,
            seed: 42,
            controllers: ControllerKind::ALL.to_vec(),
            power_model: PowerModelKind::Cubic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelSection {
    pub ladder: FrequencyLadder,
    pub util_weights: UtilWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PowerSection {
    pub cubic: CubicPowerParams,
    pub cooling: CoolingParams,
    /// Explicit multi-core coefficients; calibrated against the cubic model
    /// when absent.
    pub multicore: Option<MulticorePowerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InventorySection {
    pub pm_count: usize,
    pub cores_range: (u32, u32),
    pub ram_options_gb: Vec<f64>,
}

impl Default for InventorySection {
    fn default() -> Self {
        Self {
            pm_count: 200,
            cores_range: (1, 4),
            ram_options_gb: vec![16.0, 24.0, 32.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSection {
    pub vm_count: usize,
    pub cores_range: (u32, u32),
    pub ram_range_gb: (u32, u32),
    pub beta_source: BetaSource,
    /// Optional `vm_id,cores,ram_gb,beta,boot_step,delete_step` file; when
    /// set, the generator is not used.
    pub file: Option<PathBuf>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let spec = WorkloadSpec::default();
        Self {
            vm_count: spec.vm_count,
            cores_range: spec.cores_range,
            ram_range_gb: spec.ram_range_gb,
            beta_source: spec.beta_source,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TracesSection {
    pub electricity: ElectricityMode,
    /// Mean of the synthetic reference price series, USD/kWh.
    pub base_mean_price: f64,
    pub prices_file: Option<PathBuf>,
    pub temperatures_file: Option<PathBuf>,
    pub datacenters: Vec<DataCenter>,
}

impl Default for TracesSection {
    fn default() -> Self {
        Self {
            electricity: ElectricityMode::Variable,
            base_mean_price: 0.025,
            prices_file: None,
            temperatures_file: None,
            datacenters: default_datacenters(),
        }
    }
}

/// Six synthetic locations. Means sit at wholesale real-time levels and are
/// illustrative, not measured tariffs.
pub fn default_datacenters() -> Vec<DataCenter> {
    let dc = |id: &str, name: &str, tz: f64, price: f64, temp: f64| DataCenter {
        id: DcId::new(id),
        name: name.to_owned(),
        timezone_offset_h: tz,
        mean_price_usd_per_kwh: price,
        mean_temp_c: temp,
    };
    vec![
        dc("dalles", "The Dalles", -8.0, 0.0225, 12.0),
        dc("bluffs", "Council Bluffs", -6.0, 0.020, 10.0),
        dc("lenoir", "Lenoir", -5.0, 0.025, 16.0),
        dc("dublin", "Dublin", 0.0, 0.040, 10.0),
        dc("ghislain", "St. Ghislain", 1.0, 0.035, 11.0),
        dc("hamina", "Hamina", 2.0, 0.030, 6.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSection {
    pub migration_energy_wh_per_gb: f64,
    pub beta_bins: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            migration_energy_wh_per_gb: 10.0,
            beta_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SweepSection {
    /// Concurrent simulations; 0 uses every available core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimulationConfig {
    pub simulation: SimulationSection,
    pub model: ModelSection,
    pub power: PowerSection,
    pub pricing: PricingParams,
    pub inventory: InventorySection,
    pub workload: WorkloadSection,
    pub traces: TracesSection,
    pub controllers: ControllerSettings,
    pub engine: EngineSection,
    pub sweep: SweepSection,
}

/// Fully resolved simulation inputs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub pms: Vec<PhysicalMachine>,
    pub vms: Vec<VirtualMachine>,
    pub prices: TraceSet,
    pub temps: TraceSet,
    pub power: PowerModel,
    /// Multi-core calibration residual, W, when the polynomial was fitted.
    pub calibration_residual_w: Option<f64>,
}

impl SimulationConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Read a config file; relative trace paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = dir.join(&*inner);
                }
            }
        };
        fix(&mut self.workload.file);
        fix(&mut self.traces.prices_file);
        fix(&mut self.traces.temperatures_file);
        if let BetaSource::FromFile { path } = &mut self.workload.beta_source {
            if Path::new(path).is_relative() {
                *path = dir.join(&*path).display().to_string();
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Same config with the controller list cleared; reports from runs
    /// that differ only in controller compare equal under this key.
    pub fn comparison_key(&self) -> String {
        let mut c = self.clone();
        c.simulation.controllers.clear();
        c.sweep = SweepSection::default();
        c.to_toml()
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            vm_count: self.workload.vm_count,
            cores_range: self.workload.cores_range,
            ram_range_gb: self.workload.ram_range_gb,
            sim_steps: self.simulation.steps,
            beta_source: self.workload.beta_source.clone(),
        }
    }

    /// Check every field-level invariant that does not need file access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.simulation;
        if s.steps == 0 {
            return Err(field_err("simulation.steps", "must be at least 1"));
        }
        if !(s.step_h > 0.0) {
            return Err(field_err("simulation.step_h", "must be positive"));
        }
        if s.controllers.is_empty() {
            return Err(field_err("simulation.controllers", "list at least one controller"));
        }
        self.model
            .ladder
            .check()
            .map_err(|e| field_err("model.ladder", e))?;
        let w = self.model.util_weights;
        if w.cpu < 0.0 || w.ram < 0.0 || (w.cpu + w.ram - 1.0).abs() > 1e-9 {
            return Err(field_err("model.util_weights", "weights must be >= 0 and sum to 1"));
        }
        self.power
            .cubic
            .check()
            .map_err(|e| field_err("power.cubic", e))?;
        self.power
            .cooling
            .check()
            .map_err(|e| field_err("power.cooling", e))?;
        self.pricing.check().map_err(|e| field_err("pricing", e))?;
        let inv = &self.inventory;
        if inv.pm_count == 0 {
            return Err(field_err("inventory.pm_count", "must be at least 1"));
        }
        if inv.cores_range.0 == 0 || inv.cores_range.0 > inv.cores_range.1 {
            return Err(field_err("inventory.cores_range", "must be a non-empty range of positive counts"));
        }
        if inv.ram_options_gb.is_empty() || inv.ram_options_gb.iter().any(|&r| !(r > 0.0)) {
            return Err(field_err("inventory.ram_options_gb", "list positive sizes"));
        }
        self.workload_spec()
            .check()
            .map_err(|e| field_err("workload", e))?;
        if self.workload.file.is_none() {
            match &self.workload.beta_source {
                BetaSource::ExponentialFit { rate } if !(*rate > 0.0) => {
                    return Err(field_err("workload.beta_source.rate", "must be positive"))
                }
                BetaSource::Fixed { beta } if !(0.0..=1.0).contains(beta) => {
                    return Err(field_err("workload.beta_source.beta", "must lie in [0, 1]"))
                }
                _ => {}
            }
        }
        if self.traces.datacenters.is_empty() {
            return Err(field_err("traces.datacenters", "configure at least one data center"));
        }
        for (i, dc) in self.traces.datacenters.iter().enumerate() {
            dc.check()
                .map_err(|e| field_err(&format!("traces.datacenters[{i}]"), e))?;
        }
        if !(self.traces.base_mean_price > 0.0) {
            return Err(field_err("traces.base_mean_price", "must be positive"));
        }
        self.controllers
            .check()
            .map_err(|e| field_err("controllers", e))?;
        if self.engine.migration_energy_wh_per_gb < 0.0 {
            return Err(field_err("engine.migration_energy_wh_per_gb", "must be >= 0"));
        }
        if self.engine.beta_bins == 0 {
            return Err(field_err("engine.beta_bins", "must be at least 1"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.simulation.seed);
        rng.set_stream(stream);
        rng
    }

    /// Hosts spread round-robin over the configured data centers.
    pub fn build_pms(&self) -> Vec<PhysicalMachine> {
        let mut rng = self.rng(STREAM_INVENTORY);
        let inv = &self.inventory;
        let dcs = &self.traces.datacenters;
        let width = inv.pm_count.to_string().len().max(4);
        (0..inv.pm_count)
            .map(|i| PhysicalMachine {
                id: PmId(format!("pm{i:0width$}")),
                cores: rng.random_range(inv.cores_range.0..=inv.cores_range.1),
                ram_gb: inv.ram_options_gb[rng.random_range(0..inv.ram_options_gb.len())],
                location: dcs[i % dcs.len()].id.clone(),
            })
            .collect()
    }

    pub fn build_vms(&self) -> Result<Vec<VirtualMachine>, ConfigError> {
        match &self.workload.file {
            Some(path) => Ok(load_workload(path)?),
            None => {
                let sampler = BetaSampler::resolve(&self.workload.beta_source)?;
                Ok(generate_workload(
                    &self.workload_spec(),
                    &sampler,
                    &mut self.rng(STREAM_WORKLOAD),
                )?)
            }
        }
    }

    pub fn build_prices(&self) -> Result<TraceSet, ConfigError> {
        let steps = self.simulation.steps;
        let dcs = &self.traces.datacenters;
        match (self.traces.electricity, &self.traces.prices_file) {
            (ElectricityMode::Fixed, _) => Ok(dcs
                .iter()
                .map(|dc| (dc.id.clone(), fixed_prices(dc, steps)))
                .collect()),
            (ElectricityMode::Variable, Some(path)) => {
                Ok(load_timeseries(path, SeriesKind::ElectricityPrice)?)
            }
            (ElectricityMode::Variable, None) => {
                let step_h = self.simulation.step_h;
                let lead = dcs
                    .iter()
                    .map(|dc| (dc.timezone_offset_h / step_h).abs().ceil() as usize)
                    .max()
                    .unwrap_or(0);
                let base = synthetic_base_prices(
                    steps,
                    lead,
                    step_h,
                    self.traces.base_mean_price,
                    &mut self.rng(STREAM_PRICES),
                );
                dcs.iter()
                    .map(|dc| Ok((dc.id.clone(), synthesize_prices(&base, dc, steps, step_h)?)))
                    .collect()
            }
        }
    }

    pub fn build_temps(&self) -> Result<TraceSet, ConfigError> {
        match &self.traces.temperatures_file {
            Some(path) => Ok(load_timeseries(path, SeriesKind::Temperature)?),
            None => Ok(self
                .traces
                .datacenters
                .iter()
                .enumerate()
                .map(|(i, dc)| {
                    let mut rng = self.rng(STREAM_TEMPS + i as u64);
                    (
                        dc.id.clone(),
                        synthetic_temperatures(dc, self.simulation.steps, self.simulation.step_h, &mut rng),
                    )
                })
                .collect()),
        }
    }

    pub fn build_power(&self, pms: &[PhysicalMachine]) -> Result<(PowerModel, Option<f64>), ConfigError> {
        match self.simulation.power_model {
            PowerModelKind::Cubic => Ok((
                PowerModel::Cubic {
                    params: self.power.cubic,
                    weights: self.model.util_weights,
                },
                None,
            )),
            PowerModelKind::Multicore => {
                let max_cores = pms.iter().map(|pm| pm.cores).max().unwrap_or(1);
                match self.power.multicore {
                    Some(p) => {
                        if p.max_cores < max_cores {
                            return Err(field_err(
                                "power.multicore.max_cores",
                                format!("must cover the largest host ({max_cores} cores)"),
                            ));
                        }
                        let p = MulticorePowerParams::new(p, &self.model.ladder)
                            .map_err(|e| field_err("power.multicore", e))?;
                        Ok((PowerModel::Multicore(p), None))
                    }
                    None => {
                        let cal = calibrate_multicore(&self.power.cubic, &self.model.ladder, max_cores)
                            .map_err(|e| field_err("power.multicore", e))?;
                        Ok((PowerModel::Multicore(cal.params), Some(cal.residual_w)))
                    }
                }
            }
        }
    }

    /// Validate and resolve every input of a run.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        self.validate()?;
        let pms = self.build_pms();
        let vms = self.build_vms()?;
        let prices = self.build_prices()?;
        let temps = self.build_temps()?;
        let (power, calibration_residual_w) = self.build_power(&pms)?;
        Ok(Scenario {
            pms,
            vms,
            prices,
            temps,
            power,
            calibration_residual_w,
        })
    }
}
