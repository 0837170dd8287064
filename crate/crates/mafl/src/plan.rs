//! Per-slot resource allocation: CPU frequency, mini-batch size, SGD iterations and idle time.

use crate::domain::Scenario;
use crate::scheduling::{PeriodTable, Schedule};
use crate::wireless::{period_breakdown, PeriodBreakdown, SlotResources, WirelessError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub cpu_freq: f64,
    pub batch_size: usize,
    pub sgd_iters: usize,
    pub idle: f64,
}

impl PlanEntry {
    pub fn resources(&self) -> SlotResources {
        SlotResources {
            cpu_freq: self.cpu_freq,
            batch_size: self.batch_size as f64,
            sgd_iters: self.sgd_iters as f64,
            idle: self.idle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    /// entries[device][aggregation]
    pub entries: Vec<Vec<PlanEntry>>,
    /// Idle time after the last period, per device.
    pub final_idle: Vec<f64>,
    pub e_min: usize,
    pub e_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePlan {
    pub tasks: Vec<TaskPlan>,
}

impl ResourcePlan {
    /// Period breakdowns of task `j`, zero where the device is not dispatched.
    pub fn periods(
        &self,
        scenario: &Scenario,
        schedule: &Schedule,
        j: usize,
    ) -> Result<Vec<Vec<PeriodBreakdown>>, WirelessError> {
        let t = &schedule.tasks[j];
        let plan = &self.tasks[j];
        (0..scenario.num_devices())
            .map(|i| {
                (0..t.num_aggregations())
                    .map(|g| period_breakdown(scenario, i, j, g, t.upload[i][g], &plan.entries[i][g].resources()))
                    .collect()
            })
            .collect()
    }

    /// Local periods and idle times of task `j` in the form the schedule checker expects.
    pub fn period_table(
        &self,
        scenario: &Scenario,
        schedule: &Schedule,
        j: usize,
    ) -> Result<PeriodTable, WirelessError> {
        let p = self.periods(scenario, schedule, j)?;
        Ok(PeriodTable {
            local: p.iter().map(|r| r.iter().map(|b| b.total).collect()).collect(),
            idle: self.tasks[j].entries.iter().map(|r| r.iter().map(|e| e.idle).collect()).collect(),
        })
    }

    /// Each task's fraction of all SGD iterations over dispatched slots.
    pub fn sgd_shares(&self, schedule: &Schedule) -> Vec<f64> {
        let per_task: Vec<f64> = schedule
            .tasks
            .iter()
            .zip(&self.tasks)
            .map(|(t, tp)| {
                let mut s = 0.0;
                for (i, row) in tp.entries.iter().enumerate() {
                    for (g, e) in row.iter().enumerate() {
                        if t.upload[i][g] {
                            s += e.sgd_iters as f64;
                        }
                    }
                }
                s
            })
            .collect();
        let total: f64 = per_task.iter().sum();
        per_task.iter().map(|s| if total > 0.0 { s / total } else { 0.0 }).collect()
    }

    /// Box and budget violations of the plan, as readable messages.
    pub fn check(&self, scenario: &Scenario, schedule: &Schedule) -> Vec<String> {
        let mut out = Vec::new();
        let tol = 1e-9;
        for (i, d) in scenario.devices.iter().enumerate() {
            let (fmin, fmax) = d.cpu_freq_bounds;
            let g_max = scenario.tasks.iter().map(|t| t.num_aggregations).max().unwrap_or(0);
            for g in 0..g_max {
                let active: Vec<usize> = (0..scenario.num_tasks())
                    .filter(|&j| g < scenario.tasks[j].num_aggregations && schedule.tasks[j].upload[i][g])
                    .collect();
                if active.is_empty() {
                    continue;
                }
                let f: f64 = active.iter().map(|&j| self.tasks[j].entries[i][g].cpu_freq).sum();
                if f < fmin * (1.0 - tol) || f > fmax * (1.0 + tol) {
                    out.push(format!("cpu_frequency: device {i} g={g} total {f} outside [{fmin}, {fmax}]"));
                }
            }
            let mut energy = 0.0;
            for j in 0..scenario.num_tasks() {
                match self.periods(scenario, schedule, j) {
                    Ok(p) => energy += p[i].iter().map(|b| b.compute_energy + b.uplink_energy).sum::<f64>(),
                    Err(e) => out.push(format!("period: device {i} task {j}: {e}")),
                }
            }
            if energy > d.energy_budget * (1.0 + tol) {
                out.push(format!("energy_budget: device {i} uses {energy} J of {} J", d.energy_budget));
            }
        }
        for (j, tp) in self.tasks.iter().enumerate() {
            let (lo, hi) = scenario.sgd_count_bounds[j];
            if tp.e_min < lo as usize || tp.e_max > hi as usize || tp.e_min > tp.e_max {
                out.push(format!("sgd_bounds: task {j} range [{}, {}] outside [{lo}, {hi}]", tp.e_min, tp.e_max));
            }
            for (i, row) in tp.entries.iter().enumerate() {
                let size = scenario.devices[i].dataset_sizes[j];
                for (g, e) in row.iter().enumerate() {
                    if !schedule.tasks[j].upload[i][g] {
                        continue;
                    }
                    if e.sgd_iters < tp.e_min || e.sgd_iters > tp.e_max {
                        out.push(format!("sgd_bounds: task {j} device {i} g={g} iterations {}", e.sgd_iters));
                    }
                    if e.batch_size < 1 || e.batch_size > size {
                        out.push(format!("batch_bounds: task {j} device {i} g={g} batch {} of {size}", e.batch_size));
                    }
                    if !(e.idle >= 0.0) {
                        out.push(format!("nonnegative_times: task {j} device {i} g={g} idle {}", e.idle));
                    }
                }
            }
            for (i, &fi) in tp.final_idle.iter().enumerate() {
                if !(fi >= -tol) {
                    out.push(format!("final_idle: task {j} device {i} final idle {fi}"));
                }
            }
        }
        out
    }
}
