//! Joint device scheduling and resource allocation by proximal successive convex
//! approximation over a continuous relaxation, followed by rounding and repair.

pub mod families;
pub mod problem;
pub mod repair;
pub mod solver;

use log::{debug, info};
use thiserror::Error;

use crate::bound::{eval_bound, BoundConstants, BoundError};
use crate::domain::Scenario;
use crate::plan::ResourcePlan;
use crate::scheduling::Schedule;
use crate::wireless::WirelessError;

pub use problem::{assemble_problem, classify_constraints, group_of, ConstraintGroups, Group, ProblemP};
pub use repair::{assign_idle_times, round_and_repair, RepairError};
pub use solver::{sca_step, solve_surrogate, DualState, ScaConfig, SurrogateConstraint, SurrogateProblem};

use problem::{B, E, F, U};
use solver::SurrogateConstraint as SC;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error("problem assembly: {0}")]
    Problem(String),
    #[error("constraint '{0}' belongs to no group")]
    Unclassified(String),
    #[error("no feasible starting point: {0}")]
    NoFeasibleStart(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite objective or gradient at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub binary_gap: f64,
    pub inner_exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub schedule: Schedule,
    pub plan: ResourcePlan,
    pub history: Vec<IterationRecord>,
    /// Final relaxed point.
    pub relaxed: Vec<f64>,
    /// Objective of the rounded schedule and plan.
    pub objective: f64,
}

/// c1 Σ_j γ_j bound_j + Σ_j χ_j/G_j Σ_{dispatches} (c2 (E^U + E^C) + c3 E^D).
pub fn objective_value(
    scenario: &Scenario,
    constants: &[BoundConstants],
    schedule: &Schedule,
    plan: &ResourcePlan,
) -> Result<f64, OptimizeError> {
    let (c1, c2, c3) = scenario.objective_weights;
    let mut total = 0.0;
    for (j, t) in scenario.tasks.iter().enumerate() {
        if c1 != 0.0 && t.importance != 0.0 {
            let sizes: Vec<usize> = scenario.devices.iter().map(|d| d.dataset_sizes[j]).collect();
            let r = eval_bound(t, &sizes, &schedule.tasks[j], &plan.tasks[j], &constants[j])?;
            total += c1 * t.importance * r.total;
        }
        let periods = plan.periods(scenario, schedule, j)?;
        let energy: f64 = periods
            .iter()
            .flatten()
            .map(|p| c2 * (p.uplink_energy + p.compute_energy) + c3 * p.downlink_energy)
            .sum();
        total += t.energy_weight * energy / t.num_aggregations as f64;
    }
    Ok(total)
}

/// How uploads are spread over the devices at the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPattern {
    RoundRobin,
    /// Every device holds 1/I of each slot.
    Uniform,
}

/// Uploads following `pattern` with the given normalized (f share, B/D, e) settings.
fn starting_point(p: &ProblemP, pattern: StartPattern, f_share: f64, batch: f64, iters: f64) -> Vec<f64> {
    let l = &p.layout;
    let mut v = vec![0.0; l.len];
    for (j, &g_n) in l.aggregations.iter().enumerate() {
        for i in 0..l.devices {
            for g in 0..g_n {
                v[l.idx(j, i, g, U)] = match pattern {
                    StartPattern::RoundRobin => f64::from(u8::from(g % l.devices == i)),
                    StartPattern::Uniform => 1.0 / l.devices as f64,
                };
                v[l.idx(j, i, g, F)] = f_share;
                v[l.idx(j, i, g, B)] = batch;
                v[l.idx(j, i, g, E)] = iters;
            }
        }
        v[l.emax(j)] = 1.0;
    }
    // clamp into the box; f shares respect the per-slot sum because each is at most 1/J
    v.iter().zip(&p.set.bounds).map(|(x, &(lo, hi))| x.clamp(lo, hi)).collect()
}

/// Feasible relaxed starting point with the fewest SGD iterations, trying a mid-range
/// frequency and batch first and then lighter settings.
pub fn initial_point(p: &ProblemP, pattern: StartPattern) -> Result<Vec<f64>, OptimizeError> {
    let tasks = p.scenario.num_tasks() as f64;
    let mid_f = p
        .scenario
        .devices
        .iter()
        .map(|d| 0.5 * (d.cpu_freq_bounds.0 + d.cpu_freq_bounds.1) / (tasks * d.cpu_freq_bounds.1))
        .fold(f64::INFINITY, f64::min);
    let candidates = [(mid_f, 0.5, 0.0), (1.0 / tasks, 0.5, 0.0), (1.0 / tasks, 0.0, 0.0)];
    let mut last = String::new();
    for &(f, b, e) in &candidates {
        let v = starting_point(p, pattern, f, b, e);
        let worst = p
            .constraints
            .iter()
            .filter(|c| c.name != "binary_upload")
            .map(|c| (c.value(&v), c.name))
            .fold((f64::NEG_INFINITY, ""), |a, b| if b.0 > a.0 { b } else { a });
        if worst.0 <= 1e-9 {
            return Ok(v);
        }
        last = format!("{} exceeded by {:.3e}", worst.1, worst.0);
    }
    Err(OptimizeError::NoFeasibleStart(last))
}

/// Run the SCA loop from `start` and return the final relaxed point and its history.
pub fn run_sca(
    p: &ProblemP,
    start: Vec<f64>,
    config: &ScaConfig,
) -> Result<(Vec<f64>, Vec<IterationRecord>), OptimizeError> {
    config.validate().map_err(OptimizeError::Config)?;
    let mut v = start;
    let o0 = p.objective(&v);
    let scale = if o0.abs() > 0.0 && o0.is_finite() { p.num_vars() as f64 / o0.abs() } else { 1.0 };
    let mut duals = DualState::default();
    let mut history = Vec::new();
    for m in 0..config.max_outer_iters {
        let (obj, mut grad) = p.objective_gradient(&v);
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimizeError::NonFinite(m));
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        let surrogates: Vec<SC> = p
            .constraints
            .iter()
            .map(|c| SC {
                support: c.support.clone(),
                surrogate: c.family.surrogate(
                    &c.local(&v),
                    if c.equality { config.lipschitz_eq } else { config.lipschitz_ie },
                ),
                equality: c.equality,
            })
            .collect();
        let sp = SurrogateProblem {
            anchor: &v,
            objective_grad: &grad,
            prox_weight: config.prox_weight,
            constraints: &surrogates,
            set: &p.set,
        };
        let sol = solve_surrogate(&sp, &mut duals, config);
        let next = sca_step(&v, &sol.v, config.step);
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rec = IterationRecord {
            iteration: m,
            objective: obj,
            max_violation: p.max_violation(&v),
            binary_gap: p.binary_gap(&v),
            inner_exact: sol.exact,
        };
        debug!("sca {m}: objective {:.6e} violation {:.3e} gap {:.3e}", rec.objective, rec.max_violation, rec.binary_gap);
        history.push(rec);
        v = next;
        if change <= config.step_tolerance && p.binary_gap(&v) <= config.binary_tolerance {
            break;
        }
    }
    history.push(IterationRecord {
        iteration: history.len(),
        objective: p.objective(&v),
        max_violation: p.max_violation(&v),
        binary_gap: p.binary_gap(&v),
        inner_exact: true,
    });
    Ok((v, history))
}

/// Assemble, then iterate, round and repair from a round-robin and a uniform start and
/// keep the rounded result with the lower objective.
pub fn optimize(
    scenario: &Scenario,
    constants: &[BoundConstants],
    config: &ScaConfig,
) -> Result<OptimizeResult, OptimizeError> {
    let p = assemble_problem(scenario, constants)?;
    classify_constraints(&p)?;
    let mut best: Option<OptimizeResult> = None;
    let mut first_err = None;
    for pattern in [StartPattern::RoundRobin, StartPattern::Uniform] {
        let attempt = initial_point(&p, pattern).and_then(|start| {
            let (relaxed, history) = run_sca(&p, start, config)?;
            let (schedule, plan) = round_and_repair(&p, &relaxed)?;
            let objective = objective_value(scenario, constants, &schedule, &plan)?;
            Ok(OptimizeResult { schedule, plan, history, relaxed, objective })
        });
        match attempt {
            Ok(r) => {
                debug!("{pattern:?} start: rounded objective {:.6e}", r.objective);
                if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                    best = Some(r);
                }
            }
            Err(e) => {
                debug!("{pattern:?} start failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let r = best.ok_or_else(|| first_err.expect("two attempts"))?;
    info!(
        "optimizer finished after {} iterations, rounded objective {:.6e}",
        r.history.len().saturating_sub(1),
        r.objective
    );
    Ok(r)
}

/// Optimize only (f, B, e) with the uploads pinned to round robin.
pub fn optimize_resources_round_robin(
    scenario: &Scenario,
    constants: &[BoundConstants],
    config: &ScaConfig,
) -> Result<OptimizeResult, OptimizeError> {
    let mut p = assemble_problem(scenario, constants)?;
    classify_constraints(&p)?;
    let start = initial_point(&p, StartPattern::RoundRobin)?;
    let l = p.layout.clone();
    for (j, &g_n) in l.aggregations.iter().enumerate() {
        for i in 0..l.devices {
            for g in 0..g_n {
                let k = l.idx(j, i, g, U);
                p.set.bounds[k] = (start[k], start[k]);
            }
        }
    }
    let (relaxed, history) = run_sca(&p, start, config)?;
    let (schedule, plan) = round_and_repair(&p, &relaxed)?;
    let objective = objective_value(scenario, constants, &schedule, &plan)?;
    Ok(OptimizeResult { schedule, plan, history, relaxed, objective })
}
