//! The relaxed joint scheduling and resource problem over normalized variables.
//!
//! Per (task j, device i, aggregation g) the variables are u (upload indicator),
//! f/f_max, B/D and e/e_hi; per task there is e_max/e_hi. Receptions are tied to
//! uploads (see [`crate::scheduling::lagged_receptions`]) so the tensor entries
//! are products of upload variables only.

use crate::autodiff::{gradient, Differentiable, Real};
use crate::bound::{loss_gap_term, row_terms, staleness_term, BoundConstants, RowInput};
use crate::domain::Scenario;
use crate::wireless::{link_budgets, transfer_cost};

use super::families::Family;
use super::solver::{ConvexSet, SumGroup};
use super::OptimizeError;

pub const U: usize = 0;
pub const F: usize = 1;
pub const B: usize = 2;
pub const E: usize = 3;

/// Index map of the flattened variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub devices: usize,
    pub aggregations: Vec<usize>,
    offsets: Vec<usize>,
    emax_offset: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(devices: usize, aggregations: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(aggregations.len());
        let mut n = 0;
        for &g in &aggregations {
            offsets.push(n);
            n += 4 * devices * g;
        }
        let emax_offset = n;
        let len = n + aggregations.len();
        Layout { devices, aggregations, offsets, emax_offset, len }
    }

    pub fn idx(&self, j: usize, i: usize, g: usize, k: usize) -> usize {
        self.offsets[j] + 4 * (i * self.aggregations[j] + g) + k
    }

    pub fn emax(&self, j: usize) -> usize {
        self.emax_offset + j
    }

    /// Index of the variable standing for R_i^(g') of task `j`.
    pub fn reception(&self, j: usize, i: usize, gp: usize, staleness_limit: usize) -> usize {
        if staleness_limit == 0 {
            self.idx(j, i, gp, U)
        } else if gp >= 1 {
            self.idx(j, i, gp - 1, U)
        } else {
            self.idx(j, (i + 1) % self.devices, 0, U)
        }
    }
}

/// Fixed per-slot quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotData {
    /// Downlink plus uplink delay, s.
    pub comm_time: f64,
    pub uplink_energy: f64,
    pub downlink_energy: f64,
    /// T^C = kappa_time · u e b / f in normalized variables.
    pub kappa_time: f64,
    /// E^C = kappa_energy · u e b f² in normalized variables.
    pub kappa_energy: f64,
}

/// Per-task normalization ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskRange {
    pub e_lo: f64,
    pub e_hi: f64,
}

#[derive(Debug, Clone)]
pub struct ProblemP {
    pub scenario: Scenario,
    pub constants: Vec<BoundConstants>,
    pub layout: Layout,
    /// slots[j][i][g]
    pub slots: Vec<Vec<Vec<SlotData>>>,
    pub ranges: Vec<TaskRange>,
    /// Per-task lower bound of f/f_max, per device.
    pub f_lo: Vec<f64>,
    pub set: ConvexSet,
    rows: Vec<RowObjective>,
    pub constraints: Vec<ConstraintInstance>,
}

/// Constraint groups of the joint problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    ConvexEquality,
    ConvexInequality,
    NonconvexEquality,
    NonconvexInequality,
}

pub const CONVEX_EQUALITIES: &[&str] =
    &["uplink_transfer", "downlink_transfer", "qoe_window", "single_uploader", "upload_count"];
pub const CONVEX_INEQUALITIES: &[&str] = &[
    "energy_budget",
    "reception_count",
    "cpu_frequency",
    "sgd_bounds",
    "batch_bounds",
    "nonnegative_times",
    "final_idle",
];
pub const NONCONVEX_EQUALITIES: &[&str] =
    &["tensor_construction", "compute_time", "compute_energy", "local_period", "idle_gating"];
pub const NONCONVEX_INEQUALITIES: &[&str] = &["upload_order", "binary_receive", "binary_upload"];

/// The four named groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGroups {
    pub convex_eq: Vec<&'static str>,
    pub convex_ie: Vec<&'static str>,
    pub nonconvex_eq: Vec<&'static str>,
    pub nonconvex_ie: Vec<&'static str>,
}

/// Group of a named constraint.
pub fn group_of(name: &str) -> Result<Group, OptimizeError> {
    let lists = [
        (CONVEX_EQUALITIES, Group::ConvexEquality),
        (CONVEX_INEQUALITIES, Group::ConvexInequality),
        (NONCONVEX_EQUALITIES, Group::NonconvexEquality),
        (NONCONVEX_INEQUALITIES, Group::NonconvexInequality),
    ];
    lists
        .iter()
        .find(|(l, _)| l.contains(&name))
        .map(|&(_, g)| g)
        .ok_or_else(|| OptimizeError::Unclassified(name.to_string()))
}

/// Group listing, after checking that every registered constraint is classified.
pub fn classify_constraints(problem: &ProblemP) -> Result<ConstraintGroups, OptimizeError> {
    for c in &problem.constraints {
        group_of(c.name)?;
    }
    Ok(ConstraintGroups {
        convex_eq: CONVEX_EQUALITIES.to_vec(),
        convex_ie: CONVEX_INEQUALITIES.to_vec(),
        nonconvex_eq: NONCONVEX_EQUALITIES.to_vec(),
        nonconvex_ie: NONCONVEX_INEQUALITIES.to_vec(),
    })
}

/// A family applied to a slice of the variable vector, enforced as `≤ 0` (or `= 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintInstance {
    pub name: &'static str,
    pub support: Vec<usize>,
    pub family: Family,
    pub equality: bool,
}

impl ConstraintInstance {
    pub fn local(&self, v: &[f64]) -> Vec<f64> {
        self.support.iter().map(|&c| v[c]).collect()
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        self.family.value(&self.local(v))
    }
}

/// Objective contribution of one (task, device, aggregation) row.
#[derive(Debug, Clone)]
struct RowObjective {
    inputs: Vec<usize>,
    /// Local positions of u at g..=last and of the tied reception at g..=last.
    u_pos: Vec<usize>,
    r_pos: Vec<usize>,
    f_pos: usize,
    b_pos: usize,
    e_pos: usize,
    bound_weight: f64,
    inv: f64,
    eta: f64,
    dissimilarity: f64,
    sample_variance: f64,
    dataset_size: f64,
    e_hi: f64,
    constants: BoundConstants,
    energy_weight: f64,
    c2: f64,
    c3: f64,
    slot: SlotData,
}

impl Differentiable for RowObjective {
    fn eval<T: Real>(&self, x: &[T]) -> T {
        let u0 = x[self.u_pos[0]];
        let mut weight = T::zero();
        let mut gap = T::one();
        for k in 0..self.r_pos.len() {
            if k >= 2 {
                gap = gap * (T::one() - x[self.u_pos[k - 1]]);
            }
            weight += u0 * x[self.r_pos[k]] * gap;
        }
        let e = x[self.e_pos];
        let b = x[self.b_pos];
        let f = x[self.f_pos];
        let mut total = T::zero();
        if self.bound_weight != 0.0 {
            let rt = row_terms(
                self.inv,
                &self.constants,
                &RowInput {
                    weight,
                    sgd_iters: e.scale(self.e_hi),
                    batch: b.scale(self.dataset_size),
                    eta: self.eta,
                    dissimilarity: self.dissimilarity,
                    sample_variance: self.sample_variance,
                    dataset_size: self.dataset_size,
                },
            );
            total += rt.sum().scale(self.bound_weight);
        }
        let s = self.slot;
        let device = u0.scale(s.uplink_energy) + (u0 * e * b * f * f).scale(s.kappa_energy);
        total += (device.scale(self.c2) + u0.scale(self.c3 * s.downlink_energy)).scale(self.energy_weight);
        total
    }
}

fn locate(inputs: &mut Vec<usize>, idx: usize) -> usize {
    match inputs.iter().position(|&c| c == idx) {
        Some(p) => p,
        None => {
            inputs.push(idx);
            inputs.len() - 1
        }
    }
}

/// Build the relaxed problem. `constants[j]` belongs to task `j`.
pub fn assemble_problem(scenario: &Scenario, constants: &[BoundConstants]) -> Result<ProblemP, OptimizeError> {
    if constants.len() != scenario.num_tasks() {
        return Err(OptimizeError::Problem(format!(
            "bound constants given for {} of {} tasks",
            constants.len(),
            scenario.num_tasks()
        )));
    }
    let devices = scenario.num_devices();
    let tasks = scenario.num_tasks();
    let aggs: Vec<usize> = scenario.tasks.iter().map(|t| t.num_aggregations).collect();
    let layout = Layout::new(devices, aggs.clone());
    let (c1, c2, c3) = scenario.objective_weights;

    let mut slots = Vec::with_capacity(tasks);
    let mut ranges = Vec::with_capacity(tasks);
    for (j, t) in scenario.tasks.iter().enumerate() {
        let (lo, hi) = scenario.sgd_count_bounds[j];
        ranges.push(TaskRange { e_lo: lo as f64, e_hi: hi as f64 });
        let mut per_dev = Vec::with_capacity(devices);
        for (i, d) in scenario.devices.iter().enumerate() {
            let mut row = Vec::with_capacity(t.num_aggregations);
            for g in 0..t.num_aggregations {
                let (up, down) = link_budgets(scenario, i, g)?;
                let (tu, eu) = transfer_cost(true, t.bits_per_param, t.model_dim, up.rate, d.uplink_power)?;
                let (td, ed) = transfer_cost(true, t.bits_per_param, t.model_dim, down.rate, scenario.downlink_power)?;
                let a = d.cycles_per_sample[j];
                let dsz = d.dataset_sizes[j] as f64;
                let fmax = d.cpu_freq_bounds.1;
                row.push(SlotData {
                    comm_time: tu + td,
                    uplink_energy: eu,
                    downlink_energy: ed,
                    kappa_time: a * hi as f64 * dsz / fmax,
                    kappa_energy: d.chipset_capacitance * hi as f64 * a * dsz * fmax * fmax,
                });
            }
            per_dev.push(row);
        }
        slots.push(per_dev);
    }
    let f_lo: Vec<f64> = scenario
        .devices
        .iter()
        .map(|d| d.cpu_freq_bounds.0 / (tasks as f64 * d.cpu_freq_bounds.1))
        .collect();

    // convex set
    let mut bounds = vec![(0.0, 1.0); layout.len];
    let mut groups = Vec::new();
    for (j, t) in scenario.tasks.iter().enumerate() {
        let r = ranges[j];
        for i in 0..devices {
            let dsz = scenario.devices[i].dataset_sizes[j] as f64;
            for g in 0..t.num_aggregations {
                bounds[layout.idx(j, i, g, F)] = (f_lo[i], 1.0);
                bounds[layout.idx(j, i, g, B)] = (1.0 / dsz, 1.0);
                bounds[layout.idx(j, i, g, E)] = (r.e_lo / r.e_hi, 1.0);
            }
        }
        bounds[layout.emax(j)] = (r.e_lo / r.e_hi, 1.0);
        for g in 0..t.num_aggregations {
            groups.push(SumGroup { indices: (0..devices).map(|i| layout.idx(j, i, g, U)).collect(), lo: 1.0, hi: 1.0 });
        }
    }
    let g_max = aggs.iter().copied().max().unwrap_or(0);
    for i in 0..devices {
        for g in 0..g_max {
            let idx: Vec<usize> = (0..tasks).filter(|&j| g < aggs[j]).map(|j| layout.idx(j, i, g, F)).collect();
            if idx.len() > 1 {
                groups.push(SumGroup { indices: idx, lo: f64::NEG_INFINITY, hi: 1.0 });
            }
        }
    }
    let set = ConvexSet { bounds, groups };

    // objective rows
    let mut rows = Vec::new();
    for (j, t) in scenario.tasks.iter().enumerate() {
        let g_n = t.num_aggregations;
        let inv = 1.0 / (g_n as f64 * t.eta_min());
        let c = &constants[j];
        let bound_weight = c1 * t.importance;
        let energy_weight = t.energy_weight / g_n as f64;
        for i in 0..devices {
            for g in 0..g_n {
                let mut inputs = Vec::new();
                let last = (g + t.staleness_limit).min(g_n - 1);
                let u_pos: Vec<usize> = (g..=last).map(|k| locate(&mut inputs, layout.idx(j, i, k, U))).collect();
                let r_pos: Vec<usize> = (g..=last)
                    .map(|gp| locate(&mut inputs, layout.reception(j, i, gp, t.staleness_limit)))
                    .collect();
                let f_pos = locate(&mut inputs, layout.idx(j, i, g, F));
                let b_pos = locate(&mut inputs, layout.idx(j, i, g, B));
                let e_pos = locate(&mut inputs, layout.idx(j, i, g, E));
                rows.push(RowObjective {
                    inputs,
                    u_pos,
                    r_pos,
                    f_pos,
                    b_pos,
                    e_pos,
                    bound_weight,
                    inv,
                    eta: t.eta(g),
                    dissimilarity: c.dissimilarity[i][g],
                    sample_variance: c.sample_variance[i][g],
                    dataset_size: scenario.devices[i].dataset_sizes[j] as f64,
                    e_hi: ranges[j].e_hi,
                    constants: c.clone(),
                    energy_weight,
                    c2,
                    c3,
                    slot: slots[j][i][g],
                });
            }
        }
    }

    // constraints
    let mut constraints = Vec::new();
    for (j, t) in scenario.tasks.iter().enumerate() {
        let r = ranges[j];
        for i in 0..devices {
            let dsz = scenario.devices[i].dataset_sizes[j] as f64;
            let s = &slots[j][i];
            let support: Vec<usize> =
                (0..t.num_aggregations).flat_map(|g| (0..4).map(move |k| (g, k))).map(|(g, k)| layout.idx(j, i, g, k)).collect();
            constraints.push(ConstraintInstance {
                name: "qoe_window",
                support,
                family: Family::WindowSum {
                    comm: s.iter().map(|x| x.comm_time / t.qoe_window).collect(),
                    kappa: s.iter().map(|x| x.kappa_time / t.qoe_window).collect(),
                    f_lo: f_lo[i],
                    e_lo: r.e_lo / r.e_hi,
                    b_lo: 1.0 / dsz,
                },
                equality: false,
            });
        }
    }
    for i in 0..devices {
        let budget = scenario.devices[i].energy_budget;
        let mut support = Vec::new();
        let mut comm = Vec::new();
        let mut kappa = Vec::new();
        let mut e_lo: f64 = 1.0;
        let mut b_lo: f64 = 1.0;
        for (j, t) in scenario.tasks.iter().enumerate() {
            e_lo = e_lo.min(ranges[j].e_lo / ranges[j].e_hi);
            b_lo = b_lo.min(1.0 / scenario.devices[i].dataset_sizes[j] as f64);
            for g in 0..t.num_aggregations {
                support.extend((0..4).map(|k| layout.idx(j, i, g, k)));
                comm.push(slots[j][i][g].uplink_energy / budget);
                kappa.push(slots[j][i][g].kappa_energy / budget);
            }
        }
        constraints.push(ConstraintInstance {
            name: "energy_budget",
            support,
            family: Family::EnergySum { comm, kappa, f_lo: f_lo[i], e_lo, b_lo },
            equality: false,
        });
    }
    for (j, t) in scenario.tasks.iter().enumerate() {
        for i in 0..devices {
            for g in 0..t.num_aggregations {
                constraints.push(ConstraintInstance {
                    name: "binary_upload",
                    support: vec![layout.idx(j, i, g, U)],
                    family: Family::Binary,
                    equality: false,
                });
                constraints.push(ConstraintInstance {
                    name: "sgd_bounds",
                    support: vec![layout.idx(j, i, g, E), layout.emax(j)],
                    family: Family::Linear { coeffs: vec![1.0, -1.0], offset: 0.0 },
                    equality: false,
                });
            }
        }
    }

    Ok(ProblemP {
        scenario: scenario.clone(),
        constants: constants.to_vec(),
        layout,
        slots,
        ranges,
        f_lo,
        set,
        rows,
        constraints,
    })
}

impl ProblemP {
    pub fn num_vars(&self) -> usize {
        self.layout.len
    }

    fn task_terms<T: Real>(&self, j: usize, e_max: T) -> T {
        let t = &self.scenario.tasks[j];
        let w = self.scenario.objective_weights.0 * t.importance;
        if w == 0.0 {
            return T::zero();
        }
        let c = &self.constants[j];
        (T::cst(loss_gap_term(t, c)) + staleness_term(t, c, e_max.scale(self.ranges[j].e_hi))).scale(w)
    }

    /// Objective value at a relaxed point.
    pub fn objective(&self, v: &[f64]) -> f64 {
        let mut total = 0.0;
        for r in &self.rows {
            let x: Vec<f64> = r.inputs.iter().map(|&c| v[c]).collect();
            total += r.eval(&x);
        }
        for j in 0..self.scenario.num_tasks() {
            total += self.task_terms(j, v[self.layout.emax(j)]);
        }
        total
    }

    /// Objective value and gradient by forward-mode differentiation, row by row.
    pub fn objective_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; v.len()];
        let mut total = 0.0;
        for r in &self.rows {
            let x: Vec<f64> = r.inputs.iter().map(|&c| v[c]).collect();
            let (val, g) = gradient(r, &x);
            total += val;
            for (k, &c) in r.inputs.iter().enumerate() {
                grad[c] += g[k];
            }
        }
        for j in 0..self.scenario.num_tasks() {
            let idx = self.layout.emax(j);
            struct TaskTerm<'a>(&'a ProblemP, usize);
            impl Differentiable for TaskTerm<'_> {
                fn eval<T: Real>(&self, x: &[T]) -> T {
                    self.0.task_terms(self.1, x[0])
                }
            }
            let (val, g) = gradient(&TaskTerm(self, j), &[v[idx]]);
            total += val;
            grad[idx] += g[0];
        }
        (total, grad)
    }

    /// Largest violation among registered constraints other than binary forcing.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        self.constraints
            .iter()
            .filter(|c| c.name != "binary_upload")
            .map(|c| c.value(v).max(0.0))
            .fold(self.set.violation(v).max(0.0), f64::max)
    }

    /// max u(1 − u) over upload variables (receptions are tied to them).
    pub fn binary_gap(&self, v: &[f64]) -> f64 {
        let mut m: f64 = 0.0;
        for (j, &g_n) in self.layout.aggregations.iter().enumerate() {
            for i in 0..self.layout.devices {
                for g in 0..g_n {
                    let u = v[self.layout.idx(j, i, g, U)];
                    m = m.max((u * (1.0 - u)).abs());
                }
            }
        }
        m
    }
}
