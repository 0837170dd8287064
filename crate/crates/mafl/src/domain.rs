//! Scenario data model: tasks, devices, network-wide settings and validation.

use serde::{Deserialize, Serialize};

use crate::wireless::ChannelParams;

/// One learning task (one global model trained by the federation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Number of model parameters M_j.
    pub model_dim: usize,
    /// Bits per transmitted parameter.
    pub bits_per_param: u32,
    /// Number of global aggregations G_j.
    pub num_aggregations: usize,
    /// Server mixing weight α_j.
    pub agg_weight: f64,
    /// Step sizes η_j^(g). A single entry means a constant step.
    pub learning_rate_schedule: Vec<f64>,
    /// Proximal weight ρ.
    pub reg_weight: f64,
    /// Importance γ_j of the task's convergence term.
    pub importance: f64,
    /// Weight χ_j of the task's energy term.
    pub energy_weight: f64,
    /// Wall-clock window T_j^QoE in seconds.
    pub qoe_window: f64,
    /// Staleness cap K_j.
    pub staleness_limit: usize,
}

impl TaskSpec {
    /// Step size used at aggregation `g`.
    pub fn eta(&self, g: usize) -> f64 {
        let s = &self.learning_rate_schedule;
        s[g.min(s.len() - 1)]
    }

    pub fn eta_min(&self) -> f64 {
        (0..self.num_aggregations)
            .map(|g| self.eta(g))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eta_max(&self) -> f64 {
        (0..self.num_aggregations)
            .map(|g| self.eta(g))
            .fold(0.0, f64::max)
    }

    /// Bits sent for one copy of the model.
    pub fn payload_bits(&self) -> f64 {
        self.bits_per_param as f64 * self.model_dim as f64
    }
}

/// Static description of one edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// CPU cycles per sample, one entry per task.
    pub cycles_per_sample: Vec<f64>,
    /// Effective chipset capacitance ξ_i.
    pub chipset_capacitance: f64,
    /// (f_min, f_max) in Hz, shared by all tasks on the device.
    pub cpu_freq_bounds: (f64, f64),
    pub uplink_power: f64,
    pub uplink_bandwidth: f64,
    pub downlink_bandwidth: f64,
    /// Device energy budget E_i^B in joules.
    pub energy_budget: f64,
    /// Position in metres; the base station sits at the origin.
    pub position: [f64; 2],
    /// Local dataset size per task.
    pub dataset_sizes: Vec<usize>,
}

impl DeviceProfile {
    pub fn distance(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub devices: Vec<DeviceProfile>,
    pub tasks: Vec<TaskSpec>,
    pub channel: ChannelParams,
    /// (c1, c2, c3): convergence, device energy and base-station energy weights.
    pub objective_weights: (f64, f64, f64),
    /// Base-station transmit power p^D in watts.
    pub downlink_power: f64,
    /// (e_min, e_max) per task.
    pub sgd_count_bounds: Vec<(u32, u32)>,
    pub seed: u64,
}

impl Scenario {
    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// One failed invariant, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn check(&mut self, ok: bool, path: impl Into<String>, message: &str) {
        if !ok {
            self.out.push(Violation { path: path.into(), message: message.to_string() });
        }
    }

    fn positive(&mut self, v: f64, path: String) {
        self.check(v.is_finite() && v > 0.0, path, "must be a finite positive number");
    }

    fn non_negative(&mut self, v: f64, path: String) {
        self.check(v.is_finite() && v >= 0.0, path, "must be finite and non-negative");
    }
}

/// Check every invariant of the scenario types. Nothing is clamped.
pub fn validate_scenario(s: &Scenario) -> Result<(), Vec<Violation>> {
    let mut c = Checker { out: Vec::new() };
    c.check(!s.devices.is_empty(), "devices", "must not be empty");
    c.check(!s.tasks.is_empty(), "tasks", "must not be empty");
    let (c1, c2, c3) = s.objective_weights;
    c.non_negative(c1, "objective.c1".into());
    c.non_negative(c2, "objective.c2".into());
    c.non_negative(c3, "objective.c3".into());
    c.positive(s.downlink_power, "downlink_power".into());
    c.positive(s.channel.ref_distance, "channel.ref_distance".into());
    c.positive(s.channel.noise_density, "channel.noise_density".into());
    c.check(s.channel.pathloss_exponent.is_finite(), "channel.pathloss_exponent", "must be finite");
    c.check(
        s.sgd_count_bounds.len() == s.tasks.len(),
        "sgd_count_bounds",
        "needs one (e_min, e_max) pair per task",
    );

    for (j, t) in s.tasks.iter().enumerate() {
        let p = |f: &str| format!("tasks.{j}.{f}");
        c.check(t.task_id == j, p("task_id"), "must equal the task's position in the list");
        c.check(t.model_dim >= 1, p("model_dim"), "must be at least 1");
        c.check(t.bits_per_param >= 1, p("bits_per_param"), "must be at least 1");
        c.check(t.num_aggregations >= 1, p("num_aggregations"), "must be at least 1");
        c.check(
            t.agg_weight > 0.0 && t.agg_weight < 1.0,
            p("agg_weight"),
            "agg_weight must be in open interval (0,1)",
        );
        c.check(
            !t.learning_rate_schedule.is_empty()
                && (t.learning_rate_schedule.len() == 1
                    || t.learning_rate_schedule.len() == t.num_aggregations),
            p("learning_rate_schedule"),
            "must hold one entry or one per aggregation",
        );
        for (g, eta) in t.learning_rate_schedule.iter().enumerate() {
            c.positive(*eta, format!("tasks.{j}.learning_rate_schedule.{g}"));
        }
        c.non_negative(t.reg_weight, p("reg_weight"));
        c.non_negative(t.importance, p("importance"));
        c.non_negative(t.energy_weight, p("energy_weight"));
        c.positive(t.qoe_window, p("qoe_window"));
    }

    for (j, b) in s.sgd_count_bounds.iter().enumerate() {
        c.check(b.0 >= 1, format!("sgd_count_bounds.{j}.min"), "e_min must be at least 1");
        c.check(b.0 <= b.1, format!("sgd_count_bounds.{j}.max"), "e_max must be >= e_min");
    }

    for (i, d) in s.devices.iter().enumerate() {
        let p = |f: &str| format!("devices.{i}.{f}");
        c.check(d.device_id == i, p("device_id"), "must equal the device's position in the list");
        c.check(
            d.cycles_per_sample.len() == s.tasks.len(),
            p("cycles_per_sample"),
            "needs one entry per task",
        );
        for (j, a) in d.cycles_per_sample.iter().enumerate() {
            c.positive(*a, format!("devices.{i}.cycles_per_sample.{j}"));
        }
        c.positive(d.chipset_capacitance, p("chipset_capacitance"));
        c.positive(d.cpu_freq_bounds.0, p("cpu_freq_bounds.min"));
        c.positive(d.cpu_freq_bounds.1, p("cpu_freq_bounds.max"));
        c.check(
            d.cpu_freq_bounds.0 <= d.cpu_freq_bounds.1,
            p("cpu_freq_bounds"),
            "f_min must not exceed f_max",
        );
        c.positive(d.uplink_power, p("uplink_power"));
        c.positive(d.uplink_bandwidth, p("uplink_bandwidth"));
        c.positive(d.downlink_bandwidth, p("downlink_bandwidth"));
        c.positive(d.energy_budget, p("energy_budget"));
        c.check(
            d.position.iter().all(|x| x.is_finite()),
            p("position"),
            "coordinates must be finite",
        );
        c.check(
            d.distance() >= s.channel.ref_distance,
            p("position"),
            "device must be at least the reference distance from the base station",
        );
        c.check(
            d.dataset_sizes.len() == s.tasks.len(),
            p("dataset_sizes"),
            "needs one entry per task",
        );
        for (j, n) in d.dataset_sizes.iter().enumerate() {
            c.check(*n >= 1, format!("devices.{i}.dataset_sizes.{j}"), "must be at least 1");
        }
    }

    if c.out.is_empty() {
        Ok(())
    } else {
        Err(c.out)
    }
}
