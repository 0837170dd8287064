//! TOML experiment files, dotted-path overrides and scenario construction.
//!
//! A file holds network-wide defaults, a device template (values or `[lo, hi]` ranges
//! sampled per device) and one `[[tasks]]` table per learning task:
//!
//! ```toml
//! seed = 7
//! [objective]
//! c1 = 1e-9
//! [devices]
//! count = 3
//! cycles_per_sample = [500.0, 5000.0]
//! [[tasks]]
//! model = "quadratic"
//! num_aggregations = 6
//! qoe_window = 50.0
//! dataset = { kind = "gaussian_blobs", points = 120, features = 2, labels = 3 }
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{estimate_constants, quadratic_constants, BoundConstants, BoundError};
use crate::data::{gaussian_blobs, partition_non_iid, read_csv, split_heldout, DataError, LabeledDataset};
use crate::domain::{validate_scenario, DeviceProfile, Scenario, TaskSpec, Violation};
use crate::optimizer::ScaConfig;
use crate::trainer::{LossKind, LossModel};
use crate::wireless::{derive_seed, ChannelParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("override '{0}': {1}")]
    Override(String, String),
    #[error("invalid scenario:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error("task {task}: {source}")]
    Data { task: usize, source: DataError },
    #[error(transparent)]
    Bound(#[from] BoundError),
}

/// A fixed value or a `[lo, hi]` range sampled uniformly per device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sampled {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl Sampled {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampled::Fixed(v) => v,
            Sampled::Uniform([lo, hi]) if hi > lo => rng.random_range(lo..hi),
            Sampled::Uniform([lo, _]) => lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { c1: 1e-9, c2: 1.0, c3: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub downlink_power: f64,
    /// Devices are placed uniformly in a disk of this radius around the base station.
    pub radius: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { downlink_power: 0.1, radius: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceTemplate {
    pub count: usize,
    pub cpu_freq_min: f64,
    pub cpu_freq_max: f64,
    pub chipset_capacitance: Sampled,
    pub cycles_per_sample: Sampled,
    pub uplink_power: f64,
    pub uplink_bandwidth: f64,
    pub downlink_bandwidth: f64,
    pub energy_budget: f64,
}

impl Default for DeviceTemplate {
    fn default() -> Self {
        DeviceTemplate {
            count: 10,
            cpu_freq_min: 1e6,
            cpu_freq_max: 1e7,
            chipset_capacitance: Sampled::Uniform([2e-22, 2e-19]),
            cycles_per_sample: Sampled::Uniform([5e2, 5e3]),
            uplink_power: 0.25,
            uplink_bandwidth: 1e6,
            downlink_bandwidth: 1e5,
            energy_budget: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    GaussianBlobs {
        points: usize,
        features: usize,
        labels: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

fn default_separation() -> f64 {
    3.0
}

fn default_spread() -> f64 {
    1.0
}

/// One step size or one per aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Constant(f64),
    Schedule(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub model: LossKind,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub max_labels_per_device: Option<usize>,
    #[serde(default = "default_bits")]
    pub bits_per_param: u32,
    #[serde(default = "default_aggregations")]
    pub num_aggregations: usize,
    #[serde(default = "default_agg_weight")]
    pub agg_weight: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: LearningRate,
    #[serde(default = "default_reg_weight")]
    pub reg_weight: f64,
    #[serde(default = "one")]
    pub importance: f64,
    #[serde(default = "one")]
    pub energy_weight: f64,
    pub qoe_window: f64,
    #[serde(default = "default_staleness")]
    pub staleness_limit: usize,
    /// (e_min, e_max).
    #[serde(default = "default_sgd")]
    pub sgd_iters: (u32, u32),
}

fn default_bits() -> u32 {
    4096
}
fn default_aggregations() -> usize {
    30
}
fn default_agg_weight() -> f64 {
    0.5
}
fn default_learning_rate() -> LearningRate {
    LearningRate::Constant(0.05)
}
fn default_reg_weight() -> f64 {
    1.0
}
fn one() -> f64 {
    1.0
}
fn default_staleness() -> usize {
    5
}
fn default_sgd() -> (u32, u32) {
    (1, 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub heldout_fraction: f64,
    /// Probe points per device for constant estimation.
    pub probe_points: usize,
    /// Safety factor applied to estimated constants.
    pub constant_inflation: f64,
    /// Random idle times of the async baseline are uniform on [0, scale · busy period].
    pub random_idle_scale: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { heldout_fraction: 0.2, probe_points: 20, constant_inflation: 1.2, random_idle_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub devices: DeviceTemplate,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub optimizer: ScaConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

/// Apply `KEY=VAL` overrides with dotted paths (`tasks.0.importance=1e7`).
///
/// `tasks.N.importance_ratio=R` sets the importance to R times the task's energy weight.
pub fn apply_overrides(doc: &mut toml::Value, overrides: &[(String, String)]) -> Result<(), ConfigError> {
    for (key, raw) in overrides {
        let err = |m: &str| ConfigError::Override(key.clone(), m.to_string());
        let mut parts: Vec<&str> = key.split('.').collect();
        let mut value = parse_literal(raw);
        if parts.last() == Some(&"importance_ratio") {
            let ratio = as_f64(&value).ok_or_else(|| err("ratio must be numeric"))?;
            parts.pop();
            let mut cur = &*doc;
            for p in &parts {
                cur = match cur {
                    toml::Value::Table(t) => t.get(*p).ok_or_else(|| err("no such task"))?,
                    toml::Value::Array(a) => p.parse::<usize>().ok().and_then(|k| a.get(k)).ok_or_else(|| err("no such task"))?,
                    _ => return Err(err("path runs through a scalar")),
                };
            }
            let chi = cur.get("energy_weight").and_then(as_f64).unwrap_or(1.0);
            value = toml::Value::Float(ratio * chi);
            parts.push("importance");
        }
        let (last, path) = parts.split_last().ok_or_else(|| err("empty key"))?;
        let mut cur = &mut *doc;
        for p in path {
            cur = match cur {
                toml::Value::Table(t) => t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())),
                toml::Value::Array(a) => {
                    let k: usize = p.parse().map_err(|_| err("array index expected"))?;
                    a.get_mut(k).ok_or_else(|| err("index out of range"))?
                }
                _ => return Err(err("path runs through a scalar")),
            };
        }
        match cur {
            toml::Value::Table(t) => {
                t.insert(last.to_string(), value);
            }
            toml::Value::Array(a) => {
                let k: usize = last.parse().map_err(|_| err("array index expected"))?;
                *a.get_mut(k).ok_or_else(|| err("index out of range"))? = value;
            }
            _ => return Err(err("path runs through a scalar")),
        }
    }
    Ok(())
}

/// Parse TOML text, apply overrides and deserialize.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut doc = toml::Value::Table(table);
    apply_overrides(&mut doc, overrides)?;
    doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config(&text, overrides)?;
    // relative dataset paths are resolved against the config file
    if let Some(dir) = path.parent() {
        for t in &mut cfg.tasks {
            if let DatasetConfig::Csv { path: p, .. } = &mut t.dataset {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }
    Ok(cfg)
}

/// Data and loss of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub loss: LossKind,
    pub features: usize,
    pub classes: usize,
    pub partitions: Vec<LabeledDataset>,
    pub heldout: LabeledDataset,
}

impl TaskData {
    pub fn model(&self) -> Box<dyn LossModel> {
        self.loss.model(self.features, self.classes)
    }
}

/// A built experiment: validated scenario plus per-task data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub tasks: Vec<TaskData>,
}

fn random_position<R: Rng>(rng: &mut R, radius: f64, min_distance: f64) -> [f64; 2] {
    loop {
        let r = radius * rng.random::<f64>().sqrt();
        if r < min_distance {
            continue;
        }
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        return [r * phi.cos(), r * phi.sin()];
    }
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self, ConfigError> {
        let seed = config.seed;
        let n_dev = config.devices.count;
        let mut data = Vec::with_capacity(config.tasks.len());
        for (j, t) in config.tasks.iter().enumerate() {
            let wrap = |source| ConfigError::Data { task: j, source };
            let full = match &t.dataset {
                DatasetConfig::GaussianBlobs { points, features, labels, separation, spread } => {
                    gaussian_blobs(*points, *features, *labels, *separation, *spread, derive_seed(&[seed, 2, j as u64]))
                        .map_err(wrap)?
                }
                DatasetConfig::Csv { path, has_header } => read_csv(path, *has_header).map_err(wrap)?,
            };
            let (train, heldout) =
                split_heldout(&full, config.simulation.heldout_fraction, derive_seed(&[seed, 3, j as u64])).map_err(wrap)?;
            let max_labels = t.max_labels_per_device.unwrap_or(train.label_count);
            let partitions =
                partition_non_iid(&train, n_dev, max_labels, derive_seed(&[seed, 4, j as u64])).map_err(wrap)?;
            data.push(TaskData {
                loss: t.model,
                features: full.num_features(),
                classes: full.label_count,
                partitions,
                heldout,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1]));
        let dt = &config.devices;
        let devices: Vec<DeviceProfile> = (0..n_dev)
            .map(|i| DeviceProfile {
                device_id: i,
                cycles_per_sample: (0..config.tasks.len()).map(|_| dt.cycles_per_sample.draw(&mut rng)).collect(),
                chipset_capacitance: dt.chipset_capacitance.draw(&mut rng),
                cpu_freq_bounds: (dt.cpu_freq_min, dt.cpu_freq_max),
                uplink_power: dt.uplink_power,
                uplink_bandwidth: dt.uplink_bandwidth,
                downlink_bandwidth: dt.downlink_bandwidth,
                energy_budget: dt.energy_budget,
                position: random_position(&mut rng, config.network.radius, config.channel.ref_distance),
                dataset_sizes: data.iter().map(|d| d.partitions[i].len()).collect(),
            })
            .collect();
        let tasks: Vec<TaskSpec> = config
            .tasks
            .iter()
            .enumerate()
            .map(|(j, t)| TaskSpec {
                task_id: j,
                model_dim: data[j].model().dim(),
                bits_per_param: t.bits_per_param,
                num_aggregations: t.num_aggregations,
                agg_weight: t.agg_weight,
                learning_rate_schedule: match &t.learning_rate {
                    LearningRate::Constant(v) => vec![*v],
                    LearningRate::Schedule(v) => v.clone(),
                },
                reg_weight: t.reg_weight,
                importance: t.importance,
                energy_weight: t.energy_weight,
                qoe_window: t.qoe_window,
                staleness_limit: t.staleness_limit,
            })
            .collect();
        let scenario = Scenario {
            devices,
            sgd_count_bounds: config.tasks.iter().map(|t| t.sgd_iters).collect(),
            tasks,
            channel: config.channel.clone(),
            objective_weights: (config.objective.c1, config.objective.c2, config.objective.c3),
            downlink_power: config.network.downlink_power,
            seed,
        };
        validate_scenario(&scenario).map_err(ConfigError::Invalid)?;
        Ok(Experiment { config, scenario, tasks: data })
    }

    /// Constants used by the optimizer: probe estimates inflated by the configured factor,
    /// with the closed-form values substituted for quadratic tasks.
    pub fn bound_constants(&self) -> Result<Vec<BoundConstants>, ConfigError> {
        let sim = &self.config.simulation;
        let mut out = Vec::with_capacity(self.tasks.len());
        for (j, td) in self.tasks.iter().enumerate() {
            let t = &self.scenario.tasks[j];
            let model = td.model();
            let est = estimate_constants(
                model.as_ref(),
                &td.partitions,
                t.num_aggregations,
                t.reg_weight,
                sim.probe_points,
                derive_seed(&[self.scenario.seed, 5, j as u64]),
            )?;
            for w in &est.warnings {
                log::warn!("task {j}: {w}");
            }
            let c = est.constants.inflated(sim.constant_inflation);
            out.push(match td.loss {
                LossKind::Quadratic => quadratic_constants(
                    &td.partitions,
                    t.num_aggregations,
                    t.reg_weight,
                    c.grad_norm_cap,
                    c.reg_grad_norm_cap,
                    c.initial_loss_gap,
                ),
                LossKind::Logistic => c,
            });
        }
        Ok(out)
    }
}
