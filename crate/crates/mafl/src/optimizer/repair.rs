//! Rounding of a relaxed point to a binary schedule and an integer plan, and idle-time
//! assignment that realizes the scheduled aggregation order.

use thiserror::Error;

use crate::domain::Scenario;
use crate::plan::{PlanEntry, ResourcePlan, TaskPlan};
use crate::scheduling::{build_tensor, check_schedule, lagged_receptions, Indicator, Schedule, ScheduleLimits};
use crate::wireless::{period_breakdown, SlotResources, WirelessError};

use super::problem::{ProblemP, B, E, F, U};

#[derive(Debug, Error, PartialEq)]
pub enum RepairError {
    #[error("task {task}: device {device} needs {overrun} s beyond the QoE window")]
    QoeOverrun { task: usize, device: usize, overrun: f64 },
    #[error("task {task}: upload order at g={g} cannot be met by idling (the later uploader has no earlier period)")]
    UploadOrder { task: usize, g: usize },
    #[error("task {task}: idle assignment did not settle")]
    NoFixedPoint { task: usize },
    #[error("plan violates {0}")]
    Plan(String),
    #[error("schedule check failed: {0}")]
    Schedule(String),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
}

const TOL: f64 = 1e-9;

/// Set idle and final idle times of every task so that each dispatch starts after the
/// model it needs exists, each arrival comes after the previous aggregation, the
/// cumulative-period ordering holds, and every device fills its QoE window.
pub fn assign_idle_times(scenario: &Scenario, schedule: &Schedule, plan: &mut ResourcePlan) -> Result<(), RepairError> {
    for (j, tensor) in schedule.tasks.iter().enumerate() {
        let g_n = tensor.num_aggregations();
        let devices = tensor.num_devices();
        let task = &scenario.tasks[j];
        let mut work = vec![vec![0.0; g_n]; devices];
        for i in 0..devices {
            for g in 0..g_n {
                if tensor.upload[i][g] {
                    let mut res: SlotResources = plan.tasks[j].entries[i][g].resources();
                    res.idle = 0.0;
                    work[i][g] = period_breakdown(scenario, i, j, g, true, &res)?.total;
                }
            }
        }
        let mut extra = vec![vec![0.0; g_n]; devices];
        let mut idle = vec![vec![0.0; g_n]; devices];
        let mut ends = vec![vec![0.0; g_n]; devices];
        let mut settled = false;
        for _ in 0..10_000 {
            let mut changed = false;
            let mut free = vec![0.0f64; devices];
            let mut prev_agg = 0.0f64;
            for g in 0..g_n {
                for i in 0..devices {
                    if !tensor.upload[i][g] {
                        idle[i][g] = 0.0;
                        continue;
                    }
                    let start = free[i].max(prev_agg) + extra[i][g];
                    idle[i][g] = start - free[i];
                    ends[i][g] = start + work[i][g];
                    free[i] = ends[i][g];
                }
                let mut agg = prev_agg;
                for (i, k) in tensor.arrivals(g) {
                    if ends[i][k] < prev_agg - TOL {
                        extra[i][k] += prev_agg - ends[i][k];
                        changed = true;
                    }
                    agg = agg.max(ends[i][k]);
                }
                prev_agg = agg;
            }
            if changed {
                continue;
            }
            // cumulative period before g of each uploader at g
            let cum_before = |i: usize, g: usize| (0..g).rev().find(|&k| tensor.upload[i][k]).map_or(0.0, |k| ends[i][k]);
            for g in 0..g_n.saturating_sub(1) {
                let lhs: f64 = (0..devices).filter(|&i| tensor.upload[i][g]).map(|i| cum_before(i, g)).sum();
                let next: Vec<usize> = (0..devices).filter(|&i| tensor.upload[i][g + 1]).collect();
                let rhs: f64 = next.iter().map(|&i| cum_before(i, g + 1)).sum();
                if lhs > rhs + TOL * lhs.max(1.0) {
                    let target = next.iter().find_map(|&i| (0..=g).rev().find(|&k| tensor.upload[i][k]).map(|k| (i, k)));
                    match target {
                        Some((i, k)) => {
                            extra[i][k] += lhs - rhs;
                            changed = true;
                            break;
                        }
                        None => return Err(RepairError::UploadOrder { task: j, g }),
                    }
                }
            }
            if !changed {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(RepairError::NoFixedPoint { task: j });
        }
        let tp = &mut plan.tasks[j];
        for i in 0..devices {
            let end = (0..g_n).rev().find(|&k| tensor.upload[i][k]).map_or(0.0, |k| ends[i][k]);
            let fin = task.qoe_window - end;
            if fin < -1e-9 {
                return Err(RepairError::QoeOverrun { task: j, device: i, overrun: -fin });
            }
            tp.final_idle[i] = fin.max(0.0);
            for g in 0..g_n {
                tp.entries[i][g].idle = idle[i][g];
            }
        }
    }
    Ok(())
}

/// Round a relaxed point to a binary schedule and integer plan, then assign idle times.
///
/// Uploads go to the largest-valued device per aggregation, except that a device not yet
/// used may not be chosen once any device has uploaded twice (the cumulative-period order
/// could not be met otherwise). Receptions follow the tie used by the relaxation.
pub fn round_and_repair(problem: &ProblemP, v: &[f64]) -> Result<(Schedule, ResourcePlan), RepairError> {
    let s = &problem.scenario;
    let l = &problem.layout;
    let devices = s.num_devices();
    let mut tensors = Vec::new();
    for (j, t) in s.tasks.iter().enumerate() {
        let g_n = t.num_aggregations;
        let mut upload = Indicator::new(devices, g_n);
        let mut seen = vec![false; devices];
        let mut repeated = false;
        for g in 0..g_n {
            let mut order: Vec<usize> = (0..devices).collect();
            order.sort_by(|&a, &b| v[l.idx(j, b, g, U)].total_cmp(&v[l.idx(j, a, g, U)]).then(a.cmp(&b)));
            let pick = order.iter().copied().find(|&i| seen[i] || !repeated).unwrap_or(order[0]);
            if seen[pick] {
                repeated = true;
            }
            seen[pick] = true;
            upload[pick][g] = true;
        }
        let receive = lagged_receptions(&upload, t.staleness_limit);
        let limits = ScheduleLimits { staleness_limit: t.staleness_limit, num_aggregations: g_n };
        tensors.push(build_tensor(&receive, &upload, limits).map_err(|e| RepairError::Schedule(e.to_string()))?);
    }
    let schedule = Schedule { tasks: tensors };

    let mut tasks = Vec::new();
    for (j, t) in s.tasks.iter().enumerate() {
        let (lo, hi) = s.sgd_count_bounds[j];
        let mut entries = Vec::with_capacity(devices);
        for i in 0..devices {
            let d = &s.devices[i];
            let dsz = d.dataset_sizes[j];
            let row: Vec<PlanEntry> = (0..t.num_aggregations)
                .map(|g| PlanEntry {
                    cpu_freq: v[l.idx(j, i, g, F)] * d.cpu_freq_bounds.1,
                    batch_size: ((v[l.idx(j, i, g, B)] * dsz as f64).round() as usize).clamp(1, dsz),
                    sgd_iters: ((v[l.idx(j, i, g, E)] * hi as f64).round() as usize).clamp(lo as usize, hi as usize),
                    idle: 0.0,
                })
                .collect();
            entries.push(row);
        }
        let active: Vec<usize> = (0..devices)
            .flat_map(|i| (0..t.num_aggregations).map(move |g| (i, g)))
            .filter(|&(i, g)| schedule.tasks[j].upload[i][g])
            .map(|(i, g)| entries[i][g].sgd_iters)
            .collect();
        let e_min = active.iter().copied().min().unwrap_or(lo as usize);
        let e_max = active.iter().copied().max().unwrap_or(lo as usize);
        tasks.push(TaskPlan { entries, final_idle: vec![0.0; devices], e_min, e_max });
    }
    let mut plan = ResourcePlan { tasks };

    // frequency sums over the tasks active in each slot must sit inside the device range
    let g_max = s.tasks.iter().map(|t| t.num_aggregations).max().unwrap_or(0);
    for i in 0..devices {
        let (fmin, fmax) = s.devices[i].cpu_freq_bounds;
        for g in 0..g_max {
            let active: Vec<usize> = (0..s.num_tasks())
                .filter(|&j| g < s.tasks[j].num_aggregations && schedule.tasks[j].upload[i][g])
                .collect();
            let sum: f64 = active.iter().map(|&j| plan.tasks[j].entries[i][g].cpu_freq).sum();
            let factor = if sum < fmin {
                fmin / sum
            } else if sum > fmax {
                fmax / sum
            } else {
                1.0
            };
            for &j in &active {
                plan.tasks[j].entries[i][g].cpu_freq *= factor;
            }
        }
    }

    assign_idle_times(s, &schedule, &mut plan)?;
    let issues = plan.check(s, &schedule);
    if !issues.is_empty() {
        return Err(RepairError::Plan(issues.join("; ")));
    }
    for j in 0..s.num_tasks() {
        let periods = plan.period_table(s, &schedule, j)?;
        let v = check_schedule(&schedule.tasks[j], Some(&periods));
        if let Some(first) = v.first() {
            return Err(RepairError::Schedule(format!("task {j}: {first}")));
        }
    }
    Ok((schedule, plan))
}
