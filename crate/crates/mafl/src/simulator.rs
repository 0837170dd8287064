//! Discrete-event execution of schedules and plans, the two reference baselines, and
//! trajectory metrics.
//!
//! Every task runs on its own timeline. A dispatch of device i from w^(g) is idle,
//! downlink, local training and uplink in that order; an aggregation closes when the last
//! of its scheduled arrivals lands. Several arrivals at one aggregation are mixed in one
//! step, w^(g'+1) = w^(g') + α Σ (w_local − w^(g')).
//!
//! Model history is indexed by version: `models[j][k]` is w^(k), k = 0..=G_j.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::TaskData;
use crate::domain::Scenario;
use crate::plan::{PlanEntry, ResourcePlan};
use crate::scheduling::{check_schedule, Schedule};
use crate::trainer::{global_gradient, global_loss, local_train, ModelState, SgdTrace, SgdTraces, TrainError};
use crate::wireless::{derive_seed, period_breakdown, PeriodBreakdown, WirelessError};

const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("schedule does not pass its checks: {0}")]
    Schedule(String),
    #[error("task {task}: dispatch ({device}, g={g}) {message}")]
    Order { task: usize, device: usize, g: usize, message: String },
    #[error("task {task}: no model snapshot for version {version}")]
    MissingSnapshot { task: usize, version: usize },
    #[error("inputs disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    DownlinkStart,
    DownlinkEnd,
    ComputeEnd,
    UplinkEnd,
    Aggregate,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DownlinkStart => "downlink_start",
            EventKind::DownlinkEnd => "downlink_end",
            EventKind::ComputeEnd => "compute_end",
            EventKind::UplinkEnd => "uplink_end",
            EventKind::Aggregate => "aggregate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::DownlinkStart, Self::DownlinkEnd, Self::ComputeEnd, Self::UplinkEnd, Self::Aggregate]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// None for aggregate events.
    pub device: Option<usize>,
    pub task: usize,
    /// Version the dispatch trained from; for aggregate events, the aggregation index.
    pub g: usize,
    /// First aggregation the upload completes, if any.
    pub g_prime: Option<usize>,
    pub device_energy: f64,
    pub bs_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    /// Sorted by time, ties by (task, device, kind).
    pub events: Vec<Event>,
    /// Cumulative compute plus uplink energy per device.
    pub device_energy: Vec<f64>,
    /// Cumulative downlink energy of the base station.
    pub bs_energy: f64,
    /// aggregation_times[j][g'] closes aggregation g' of task j.
    pub aggregation_times: Vec<Vec<f64>>,
    /// End of the last local period plus final idle, per [task][device].
    pub timeline_end: Vec<Vec<f64>>,
}

impl EventLog {
    fn new(devices: usize, tasks: usize) -> Self {
        EventLog {
            events: Vec::new(),
            device_energy: vec![0.0; devices],
            bs_energy: 0.0,
            aggregation_times: vec![Vec::new(); tasks],
            timeline_end: vec![vec![0.0; devices]; tasks],
        }
    }

    pub fn aggregation_count(&self, task: usize) -> usize {
        self.aggregation_times[task].len()
    }

    fn push_dispatch(&mut self, task: usize, device: usize, g: usize, g_prime: Option<usize>, start: f64, p: &PeriodBreakdown) {
        let dl = start + p.downlink;
        let comp = dl + p.compute;
        let up = comp + p.uplink;
        let base = Event { time: start, kind: EventKind::DownlinkStart, device: Some(device), task, g, g_prime, device_energy: 0.0, bs_energy: 0.0 };
        self.events.push(base.clone());
        self.events.push(Event { time: dl, kind: EventKind::DownlinkEnd, bs_energy: p.downlink_energy, ..base.clone() });
        self.events.push(Event { time: comp, kind: EventKind::ComputeEnd, device_energy: p.compute_energy, ..base.clone() });
        self.events.push(Event { time: up, kind: EventKind::UplinkEnd, device_energy: p.uplink_energy, ..base });
        self.device_energy[device] += p.compute_energy + p.uplink_energy;
        self.bs_energy += p.downlink_energy;
    }

    fn push_aggregate(&mut self, task: usize, gp: usize, time: f64) {
        self.events.push(Event {
            time,
            kind: EventKind::Aggregate,
            device: None,
            task,
            g: gp,
            g_prime: Some(gp),
            device_energy: 0.0,
            bs_energy: 0.0,
        });
        self.aggregation_times[task].push(time);
    }

    fn sort(&mut self) {
        self.events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.task.cmp(&b.task))
                .then(a.device.unwrap_or(usize::MAX).cmp(&b.device.unwrap_or(usize::MAX)))
                .then(a.kind.cmp(&b.kind))
        });
    }

    /// Device plus base-station energy of task `j` spent up to and including `time`.
    pub fn task_energy_until(&self, task: usize, time: f64) -> f64 {
        self.events
            .iter()
            .take_while(|e| e.time <= time)
            .filter(|e| e.task == task)
            .map(|e| e.device_energy + e.bs_energy)
            .sum()
    }
}

/// Trajectories of one task, indexed by model version k = 0..=G.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskMetrics {
    /// Time at which w^(k) exists (0 for the initial model).
    pub time: Vec<f64>,
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Energy of the task spent by the time w^(k) exists.
    pub energy: Vec<f64>,
    /// ‖∇F(w^(k))‖².
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub tasks: Vec<TaskMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: EventLog,
    pub metrics: RunMetrics,
    /// traces[j][i][g] for every dispatched slot; empty for baselines.
    pub traces: Vec<SgdTraces>,
    /// models[j][k] = w^(k).
    pub models: Vec<Vec<ModelState>>,
}

fn sgd_seed(seed: u64, j: usize, i: usize, g: usize) -> u64 {
    derive_seed(&[seed, 11, j as u64, i as u64, g as u64])
}

fn check_inputs(scenario: &Scenario, tasks: &[TaskData]) -> Result<(), SimError> {
    if tasks.len() != scenario.num_tasks() {
        return Err(SimError::Shape(format!("{} task datasets for {} tasks", tasks.len(), scenario.num_tasks())));
    }
    for (j, t) in tasks.iter().enumerate() {
        if t.partitions.len() != scenario.num_devices() {
            return Err(SimError::Shape(format!("task {j} has {} partitions", t.partitions.len())));
        }
        if t.model().dim() != scenario.tasks[j].model_dim {
            return Err(SimError::Shape(format!("task {j} model dimension differs from the scenario")));
        }
    }
    Ok(())
}

/// Execute `schedule` under `plan`.
pub fn run(
    scenario: &Scenario,
    schedule: &Schedule,
    plan: &ResourcePlan,
    tasks: &[TaskData],
    seed: u64,
) -> Result<RunOutput, SimError> {
    check_inputs(scenario, tasks)?;
    if schedule.tasks.len() != scenario.num_tasks() || plan.tasks.len() != scenario.num_tasks() {
        return Err(SimError::Shape("schedule or plan task count differs from the scenario".into()));
    }
    for j in 0..scenario.num_tasks() {
        let table = plan.period_table(scenario, schedule, j)?;
        if let Some(v) = check_schedule(&schedule.tasks[j], Some(&table)).first() {
            return Err(SimError::Schedule(format!("task {j}: {v}")));
        }
    }
    let devices = scenario.num_devices();
    let mut log = EventLog::new(devices, scenario.num_tasks());
    let mut all_traces = Vec::new();
    let mut all_models = Vec::new();
    for (j, task) in scenario.tasks.iter().enumerate() {
        let tensor = &schedule.tasks[j];
        let tp = &plan.tasks[j];
        let g_n = task.num_aggregations;
        let periods = plan.periods(scenario, schedule, j)?;

        // device timelines
        let mut start = vec![vec![0.0; g_n]; devices];
        let mut end = vec![vec![0.0; g_n]; devices];
        for i in 0..devices {
            let mut free = 0.0;
            for g in 0..g_n {
                if tensor.upload[i][g] {
                    start[i][g] = free + tp.entries[i][g].idle;
                    end[i][g] = free + periods[i][g].total;
                    free = end[i][g];
                }
            }
            log.timeline_end[j][i] = free + tp.final_idle[i];
        }
        let mut first_arrival: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &(i, g, gp) in &tensor.entries {
            first_arrival.entry((i, g)).or_insert(gp);
        }
        let mut agg = Vec::with_capacity(g_n);
        let mut prev = 0.0f64;
        for gp in 0..g_n {
            let t = tensor.arrivals(gp).map(|(i, g)| end[i][g]).fold(prev, f64::max);
            agg.push(t);
            prev = t;
        }
        for i in 0..devices {
            for g in 0..g_n {
                if !tensor.upload[i][g] {
                    continue;
                }
                let ready = if g == 0 { 0.0 } else { agg[g - 1] };
                if start[i][g] < ready - TIME_TOL {
                    return Err(SimError::Order {
                        task: j,
                        device: i,
                        g,
                        message: format!("starts at {:.9} before w^({g}) exists at {ready:.9}", start[i][g]),
                    });
                }
                if let Some(&gp) = first_arrival.get(&(i, g)) {
                    if gp > 0 && end[i][g] < agg[gp - 1] - TIME_TOL {
                        return Err(SimError::Order {
                            task: j,
                            device: i,
                            g,
                            message: format!(
                                "arrives at {:.9}, before aggregation {} closed at {:.9}, so it cannot complete aggregation {gp}",
                                end[i][g],
                                gp - 1,
                                agg[gp - 1]
                            ),
                        });
                    }
                }
                log.push_dispatch(j, i, g, first_arrival.get(&(i, g)).copied(), start[i][g], &periods[i][g]);
            }
        }
        for (gp, &t) in agg.iter().enumerate() {
            log.push_aggregate(j, gp, t);
        }

        // learning
        let model = tasks[j].model();
        let mut traces: SgdTraces = vec![vec![None; g_n]; devices];
        let mut locals: BTreeMap<(usize, usize), ModelState> = BTreeMap::new();
        let mut history = vec![ModelState::zeros(task.model_dim, j)];
        let train = |i: usize, g: usize, w: &ModelState, traces: &mut SgdTraces| -> Result<ModelState, TrainError> {
            let e: &PlanEntry = &tp.entries[i][g];
            let (m, tr): (ModelState, SgdTrace) = local_train(
                w,
                e.sgd_iters,
                e.batch_size,
                task.eta(g),
                task.reg_weight,
                model.as_ref(),
                &tasks[j].partitions[i],
                sgd_seed(seed, j, i, g),
            )?;
            traces[i][g] = Some(tr);
            Ok(m)
        };
        for gp in 0..g_n {
            let current = history[gp].clone();
            let mut next = current.weights.clone();
            for (i, g) in tensor.arrivals(gp) {
                if !locals.contains_key(&(i, g)) {
                    let m = train(i, g, &history[g], &mut traces)?;
                    locals.insert((i, g), m);
                }
                let w_local = &locals[&(i, g)].weights;
                for ((n, l), c) in next.iter_mut().zip(w_local).zip(&current.weights) {
                    *n += task.agg_weight * (l - c);
                }
            }
            history.push(ModelState { weights: next, task_id: j, version: gp + 1 });
        }
        for i in 0..devices {
            for g in 0..g_n {
                if tensor.upload[i][g] && traces[i][g].is_none() {
                    train(i, g, &history[g], &mut traces)?;
                }
            }
        }
        all_traces.push(traces);
        all_models.push(history);
    }
    log.sort();
    let metrics = collect_metrics(&log, &all_models, tasks)?;
    Ok(RunOutput { log, metrics, traces: all_traces, models: all_models })
}

/// Loss, held-out accuracy, cumulative energy and squared gradient norm at every version.
pub fn collect_metrics(log: &EventLog, models: &[Vec<ModelState>], tasks: &[TaskData]) -> Result<RunMetrics, SimError> {
    let mut out = Vec::with_capacity(tasks.len());
    for (j, td) in tasks.iter().enumerate() {
        let loss_model = td.model();
        let history = models.get(j).ok_or(SimError::MissingSnapshot { task: j, version: 0 })?;
        let times = log.aggregation_times.get(j).cloned().unwrap_or_default();
        let mut m = TaskMetrics::default();
        for k in 0..=times.len() {
            let w = history.get(k).filter(|w| w.version == k).ok_or(SimError::MissingSnapshot { task: j, version: k })?;
            let t = if k == 0 { 0.0 } else { times[k - 1] };
            m.time.push(t);
            m.energy.push(if k == 0 { 0.0 } else { log.task_energy_until(j, t) });
            m.loss.push(global_loss(w, &td.partitions, loss_model.as_ref())?);
            let g = global_gradient(&w.weights, &td.partitions, loss_model.as_ref())?;
            m.grad_norm.push(g.iter().map(|x| x * x).sum());
            let hits = td
                .heldout
                .points
                .iter()
                .filter(|p| loss_model.predict(&w.weights, &p.features) == p.label)
                .count();
            m.accuracy.push(if td.heldout.is_empty() { 0.0 } else { hits as f64 / td.heldout.len() as f64 });
        }
        out.push(m);
    }
    Ok(RunMetrics { tasks: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Every device trains each round; the server waits for the slowest and averages uniformly.
    SyncFedavg,
    /// Devices idle for random times and the server mixes every arrival.
    AsyncRandomIdle,
}

impl BaselineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::SyncFedavg => "sync_fedavg",
            BaselineMode::AsyncRandomIdle => "async_random_idle",
        }
    }
}

/// Per-device resource settings used by a baseline, `resources[j][i]`.
pub type BaselineResources = Vec<Vec<PlanEntry>>;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    device: usize,
    /// 0 = arrival, 1 = dispatch; arrivals go first on ties
    kind: u8,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        // reversed for a min-heap
        o.time.total_cmp(&self.time).then(o.kind.cmp(&self.kind)).then(o.device.cmp(&self.device))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Run a baseline for G_j aggregations per task.
///
/// In async mode each device idles U[0, idle_scale·P_i] before every dispatch, with P_i its
/// busy period, and downloads the newest global model when the idle ends.
pub fn run_baseline(
    scenario: &Scenario,
    mode: BaselineMode,
    tasks: &[TaskData],
    resources: &BaselineResources,
    idle_scale: f64,
    seed: u64,
) -> Result<RunOutput, SimError> {
    check_inputs(scenario, tasks)?;
    let devices = scenario.num_devices();
    if resources.len() != scenario.num_tasks() || resources.iter().any(|r| r.len() != devices) {
        return Err(SimError::Shape("baseline resources must be given per task and device".into()));
    }
    let mut log = EventLog::new(devices, scenario.num_tasks());
    let mut all_models = Vec::new();
    for (j, task) in scenario.tasks.iter().enumerate() {
        let g_n = task.num_aggregations;
        let model = tasks[j].model();
        let period = |i: usize, g: usize| -> Result<PeriodBreakdown, SimError> {
            let mut res = resources[j][i].resources();
            res.idle = 0.0;
            Ok(period_breakdown(scenario, i, j, g.min(g_n - 1), true, &res)?)
        };
        let train = |i: usize, w: &ModelState, g: usize, n: usize| -> Result<ModelState, TrainError> {
            let e = &resources[j][i];
            let (m, _) = local_train(
                w,
                e.sgd_iters,
                e.batch_size,
                task.eta(g),
                task.reg_weight,
                model.as_ref(),
                &tasks[j].partitions[i],
                sgd_seed(seed, j, i, n),
            )?;
            Ok(m)
        };
        let mut history = vec![ModelState::zeros(task.model_dim, j)];
        match mode {
            BaselineMode::SyncFedavg => {
                let mut t0 = 0.0f64;
                for r in 0..g_n {
                    let w = history[r].clone();
                    let mut sum = vec![0.0; w.weights.len()];
                    let mut t1 = t0;
                    for i in 0..devices {
                        let p = period(i, r)?;
                        log.push_dispatch(j, i, r, Some(r), t0, &p);
                        t1 = t1.max(t0 + p.total);
                        let m = train(i, &w, r, r)?;
                        for (s, x) in sum.iter_mut().zip(&m.weights) {
                            *s += x / devices as f64;
                        }
                    }
                    log.push_aggregate(j, r, t1);
                    history.push(ModelState { weights: sum, task_id: j, version: r + 1 });
                    t0 = t1;
                }
                for i in 0..devices {
                    log.timeline_end[j][i] = t0;
                }
            }
            BaselineMode::AsyncRandomIdle => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 13, j as u64]));
                let mut heap = BinaryHeap::new();
                let mut in_flight: Vec<Option<(usize, ModelState)>> = vec![None; devices];
                let mut dispatches = 0usize;
                let busy: Vec<f64> = (0..devices).map(|i| period(i, 0).map(|p| p.total)).collect::<Result<_, _>>()?;
                for (i, &b) in busy.iter().enumerate() {
                    heap.push(Pending { time: rng.random::<f64>() * idle_scale * b, device: i, kind: 1 });
                }
                while let Some(ev) = heap.pop() {
                    let i = ev.device;
                    if ev.kind == 1 {
                        if history.len() > g_n {
                            continue;
                        }
                        let g = history.len() - 1;
                        let p = period(i, g)?;
                        let m = train(i, &history[g], g, dispatches)?;
                        dispatches += 1;
                        let first = log.events.len();
                        log.push_dispatch(j, i, g, None, ev.time, &p);
                        in_flight[i] = Some((first, m));
                        heap.push(Pending { time: ev.time + p.total, device: i, kind: 0 });
                        log.timeline_end[j][i] = ev.time + p.total;
                    } else {
                        let (first, local) = in_flight[i].take().expect("arrival follows a dispatch");
                        if history.len() > g_n {
                            continue;
                        }
                        let gp = history.len() - 1;
                        for e in &mut log.events[first..first + 4] {
                            e.g_prime = Some(gp);
                        }
                        let cur = &history[gp];
                        let weights = cur
                            .weights
                            .iter()
                            .zip(&local.weights)
                            .map(|(c, l)| (1.0 - task.agg_weight) * c + task.agg_weight * l)
                            .collect();
                        log.push_aggregate(j, gp, ev.time);
                        history.push(ModelState { weights, task_id: j, version: gp + 1 });
                        let idle = rng.random::<f64>() * idle_scale * busy[i];
                        heap.push(Pending { time: ev.time + idle, device: i, kind: 1 });
                    }
                }
            }
        }
        all_models.push(history);
    }
    log.sort();
    let metrics = collect_metrics(&log, &all_models, tasks)?;
    Ok(RunOutput { log, metrics, traces: Vec::new(), models: all_models })
}

/// Average (f, B, e) of each device over its dispatches, falling back to the device's
/// first slot when it never uploads.
pub fn average_resources(schedule: &Schedule, plan: &ResourcePlan) -> BaselineResources {
    schedule
        .tasks
        .iter()
        .zip(&plan.tasks)
        .map(|(t, tp)| {
            tp.entries
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let active: Vec<&PlanEntry> = row.iter().enumerate().filter(|(g, _)| t.upload[i][*g]).map(|(_, e)| e).collect();
                    if active.is_empty() {
                        return PlanEntry { idle: 0.0, ..row[0] };
                    }
                    let n = active.len() as f64;
                    PlanEntry {
                        cpu_freq: active.iter().map(|e| e.cpu_freq).sum::<f64>() / n,
                        batch_size: (active.iter().map(|e| e.batch_size as f64).sum::<f64>() / n).round() as usize,
                        sgd_iters: (active.iter().map(|e| e.sgd_iters as f64).sum::<f64>() / n).round() as usize,
                        idle: 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

/// Smallest cumulative energy at which the loss series reaches `target`.
pub fn energy_to_reach(m: &TaskMetrics, target: f64) -> Option<f64> {
    m.loss.iter().zip(&m.energy).find(|(l, _)| **l <= target).map(|(_, e)| *e)
}
