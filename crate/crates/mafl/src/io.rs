//! CSV import and export. Every file has a header row; writes go to a temporary file in
//! the same directory and are renamed into place.
//!
//! | file | columns |
//! |---|---|
//! | schedule | task, device, g, g_prime |
//! | plan | task, device, g, cpu_freq_hz, batch_size, sgd_iters, idle_s |
//! | final idle | task, device, final_idle_s |
//! | events | time, kind, device, task, g, g_prime, device_energy_j, bs_energy_j |
//! | metrics | method, seed, task, version, time_s, loss, accuracy, energy_j, grad_norm_sq |
//! | bound | task, term, value |
//! | history | iteration, objective, max_violation, binary_gap, inner_exact |
//!
//! A schedule row with both indices is an entry of X. A row with an empty `g_prime` is an
//! upload that completes no aggregation; a row with an empty `g` is a reception with no
//! matching upload.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::bound::BoundReport;
use crate::domain::Scenario;
use crate::optimizer::IterationRecord;
use crate::plan::{PlanEntry, ResourcePlan, TaskPlan};
use crate::scheduling::{build_tensor, Indicator, Schedule, ScheduleLimits};
use crate::simulator::{EventKind, EventLog, RunMetrics};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Content { path: PathBuf, message: String },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

fn content(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Content { path: path.to_path_buf(), message: message.into() }
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(fs_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(fs_err(path))
}

/// Serialize `rows` with a header and write atomically.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    let bytes = w.into_inner().map_err(|e| content(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Read every row of a headed CSV file.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub task: usize,
    pub device: usize,
    pub g: Option<usize>,
    pub g_prime: Option<usize>,
}

pub fn schedule_rows(schedule: &Schedule) -> Vec<ScheduleRow> {
    let mut rows = Vec::new();
    for (j, t) in schedule.tasks.iter().enumerate() {
        let mut received: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut uploaded: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(i, g, gp) in &t.entries {
            rows.push(ScheduleRow { task: j, device: i, g: Some(g), g_prime: Some(gp) });
            uploaded.insert((i, g));
            received.insert((i, gp));
        }
        for i in 0..t.num_devices() {
            for g in 0..t.num_aggregations() {
                if t.upload[i][g] && !uploaded.contains(&(i, g)) {
                    rows.push(ScheduleRow { task: j, device: i, g: Some(g), g_prime: None });
                }
                if t.receive[i][g] && !received.contains(&(i, g)) {
                    rows.push(ScheduleRow { task: j, device: i, g: None, g_prime: Some(g) });
                }
            }
        }
    }
    rows
}

pub fn write_schedule(path: &Path, schedule: &Schedule) -> Result<(), IoError> {
    write_rows(path, &schedule_rows(schedule))
}

/// Rebuild a schedule for `scenario` from its rows.
pub fn schedule_from_rows(path: &Path, scenario: &Scenario, rows: &[ScheduleRow]) -> Result<Schedule, IoError> {
    let devices = scenario.num_devices();
    let mut tasks = Vec::new();
    for (j, t) in scenario.tasks.iter().enumerate() {
        let g_n = t.num_aggregations;
        let mut upload = Indicator::new(devices, g_n);
        let mut receive = Indicator::new(devices, g_n);
        for r in rows.iter().filter(|r| r.task == j) {
            let bad = |k: usize| k >= g_n || r.device >= devices;
            if let Some(g) = r.g {
                if bad(g) {
                    return Err(content(path, format!("row {r:?} is outside the scenario")));
                }
                upload[r.device][g] = true;
            }
            if let Some(gp) = r.g_prime {
                if bad(gp) {
                    return Err(content(path, format!("row {r:?} is outside the scenario")));
                }
                receive[r.device][gp] = true;
            }
        }
        let limits = ScheduleLimits { staleness_limit: t.staleness_limit, num_aggregations: g_n };
        let tensor = build_tensor(&receive, &upload, limits).map_err(|e| content(path, e.to_string()))?;
        let expected: BTreeSet<(usize, usize, usize)> = rows
            .iter()
            .filter(|r| r.task == j)
            .filter_map(|r| Some((r.device, r.g?, r.g_prime?)))
            .collect();
        let rebuilt: BTreeSet<(usize, usize, usize)> = tensor.entries.iter().copied().collect();
        if expected != rebuilt {
            return Err(content(path, format!("task {j}: listed entries differ from the ones implied by uploads and receptions")));
        }
        tasks.push(tensor);
    }
    if let Some(r) = rows.iter().find(|r| r.task >= scenario.num_tasks()) {
        return Err(content(path, format!("task {} does not exist", r.task)));
    }
    Ok(Schedule { tasks })
}

pub fn read_schedule(path: &Path, scenario: &Scenario) -> Result<Schedule, IoError> {
    let rows: Vec<ScheduleRow> = read_rows(path)?;
    schedule_from_rows(path, scenario, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub task: usize,
    pub device: usize,
    pub g: usize,
    pub cpu_freq_hz: f64,
    pub batch_size: usize,
    pub sgd_iters: usize,
    pub idle_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalIdleRow {
    pub task: usize,
    pub device: usize,
    pub final_idle_s: f64,
}

pub fn write_plan(plan_path: &Path, final_idle_path: &Path, plan: &ResourcePlan) -> Result<(), IoError> {
    let mut rows = Vec::new();
    let mut fin = Vec::new();
    for (j, tp) in plan.tasks.iter().enumerate() {
        for (i, row) in tp.entries.iter().enumerate() {
            for (g, e) in row.iter().enumerate() {
                rows.push(PlanRow {
                    task: j,
                    device: i,
                    g,
                    cpu_freq_hz: e.cpu_freq,
                    batch_size: e.batch_size,
                    sgd_iters: e.sgd_iters,
                    idle_s: e.idle,
                });
            }
            fin.push(FinalIdleRow { task: j, device: i, final_idle_s: tp.final_idle[i] });
        }
    }
    write_rows(plan_path, &rows)?;
    write_rows(final_idle_path, &fin)
}

/// Read a plan; every (task, device, g) slot must be present. e_min and e_max are taken
/// over the slots the schedule dispatches.
pub fn read_plan(
    plan_path: &Path,
    final_idle_path: &Path,
    scenario: &Scenario,
    schedule: &Schedule,
) -> Result<ResourcePlan, IoError> {
    let rows: Vec<PlanRow> = read_rows(plan_path)?;
    let fin: Vec<FinalIdleRow> = read_rows(final_idle_path)?;
    let devices = scenario.num_devices();
    let mut tasks = Vec::new();
    for (j, t) in scenario.tasks.iter().enumerate() {
        let g_n = t.num_aggregations;
        let mut slots: Vec<Vec<Option<PlanEntry>>> = vec![vec![None; g_n]; devices];
        for r in rows.iter().filter(|r| r.task == j) {
            if r.device >= devices || r.g >= g_n {
                return Err(content(plan_path, format!("row {r:?} is outside the scenario")));
            }
            slots[r.device][r.g] = Some(PlanEntry {
                cpu_freq: r.cpu_freq_hz,
                batch_size: r.batch_size,
                sgd_iters: r.sgd_iters,
                idle: r.idle_s,
            });
        }
        let mut entries = Vec::with_capacity(devices);
        for (i, row) in slots.into_iter().enumerate() {
            let full: Option<Vec<PlanEntry>> = row.into_iter().collect();
            entries.push(full.ok_or_else(|| content(plan_path, format!("task {j} device {i} has missing slots")))?);
        }
        let mut final_idle = vec![None; devices];
        for r in fin.iter().filter(|r| r.task == j) {
            if r.device >= devices {
                return Err(content(final_idle_path, format!("device {} does not exist", r.device)));
            }
            final_idle[r.device] = Some(r.final_idle_s);
        }
        let final_idle: Vec<f64> = final_idle
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| content(final_idle_path, format!("task {j} lacks a final idle time for some device")))?;
        let tensor = schedule.tasks.get(j).ok_or_else(|| content(plan_path, "schedule has fewer tasks"))?;
        let active: Vec<usize> = (0..devices)
            .flat_map(|i| (0..g_n).map(move |g| (i, g)))
            .filter(|&(i, g)| tensor.upload[i][g])
            .map(|(i, g)| entries[i][g].sgd_iters)
            .collect();
        let lo = scenario.sgd_count_bounds[j].0 as usize;
        tasks.push(TaskPlan {
            entries,
            final_idle,
            e_min: active.iter().copied().min().unwrap_or(lo),
            e_max: active.iter().copied().max().unwrap_or(lo),
        });
    }
    Ok(ResourcePlan { tasks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub time: f64,
    pub kind: String,
    pub device: Option<usize>,
    pub task: usize,
    pub g: usize,
    pub g_prime: Option<usize>,
    pub device_energy_j: f64,
    pub bs_energy_j: f64,
}

pub fn write_events(path: &Path, log: &EventLog) -> Result<(), IoError> {
    let rows: Vec<EventRow> = log
        .events
        .iter()
        .map(|e| EventRow {
            time: e.time,
            kind: e.kind.as_str().to_string(),
            device: e.device,
            task: e.task,
            g: e.g,
            g_prime: e.g_prime,
            device_energy_j: e.device_energy,
            bs_energy_j: e.bs_energy,
        })
        .collect();
    write_rows(path, &rows)
}

/// Read an event file back, checking the kind column.
pub fn read_events(path: &Path) -> Result<Vec<EventRow>, IoError> {
    let rows: Vec<EventRow> = read_rows(path)?;
    if let Some(r) = rows.iter().find(|r| EventKind::parse(&r.kind).is_none()) {
        return Err(content(path, format!("unknown event kind '{}'", r.kind)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub task: usize,
    pub version: usize,
    pub time_s: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub energy_j: f64,
    pub grad_norm_sq: f64,
}

pub fn metric_rows(method: &str, seed: u64, metrics: &RunMetrics) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (j, m) in metrics.tasks.iter().enumerate() {
        for k in 0..m.loss.len() {
            rows.push(MetricRow {
                method: method.to_string(),
                seed,
                task: j,
                version: k,
                time_s: m.time[k],
                loss: m.loss[k],
                accuracy: m.accuracy[k],
                energy_j: m.energy[k],
                grad_norm_sq: m.grad_norm[k],
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub task: usize,
    pub term: String,
    pub value: f64,
}

/// Terms a to e, the total and, when present, the simulated left-hand side.
pub fn bound_rows(task: usize, report: &BoundReport) -> Vec<BoundRow> {
    let mut rows: Vec<BoundRow> = [
        ("term_a", report.term_a),
        ("term_b", report.term_b),
        ("term_c", report.term_c),
        ("term_d", report.term_d),
        ("term_e", report.term_e),
        ("total", report.total),
    ]
    .into_iter()
    .map(|(t, v)| BoundRow { task, term: t.to_string(), value: v })
    .collect();
    if let Some(l) = report.lhs_conv {
        rows.push(BoundRow { task, term: "lhs".into(), value: l });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub binary_gap: f64,
    pub inner_exact: bool,
}

pub fn write_history(path: &Path, history: &[IterationRecord]) -> Result<(), IoError> {
    let rows: Vec<HistoryRow> = history
        .iter()
        .map(|h| HistoryRow {
            iteration: h.iteration,
            objective: h.objective,
            max_violation: h.max_violation,
            binary_gap: h.binary_gap,
            inner_exact: h.inner_exact,
        })
        .collect();
    write_rows(path, &rows)
}
