//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use mafl::autodiff::gradient;
use mafl::bound::{corollary2_scaling, eval_bound, quadratic_constants, BoundConstants};
use mafl::config::{parse_config, Experiment};
use mafl::domain::Scenario;
use mafl::optimizer::families::Family;
use mafl::optimizer::{assign_idle_times, objective_value};
use mafl::plan::{PlanEntry, ResourcePlan, TaskPlan};
use mafl::scheduling::{
    build_tensor, check_schedule, enumerate_feasible, lagged_receptions, round_robin, Indicator, Schedule,
    ScheduleLimits, ScheduleTensor,
};
use mafl::simulator::RunOutput;
use mafl::autodiff::finite_difference;
use mafl::data::{gaussian_blobs, DataPoint, LabeledDataset};
use mafl::trainer::{global_loss, regularized_gradient, regularized_loss, LossKind, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quadratic tasks on blob data; `tasks` entries are (num_aggregations, staleness_limit).
pub fn quadratic_experiment(devices: usize, tasks: &[(usize, usize)], seed: u64) -> Experiment {
    let mut text = format!("seed = {seed}\n[devices]\ncount = {devices}\n");
    for &(g, k) in tasks {
        text.push_str(&format!(
            "[[tasks]]\nmodel = \"quadratic\"\nnum_aggregations = {g}\nstaleness_limit = {k}\nqoe_window = 50.0\n\
             learning_rate = 0.1\nreg_weight = 0.5\nsgd_iters = [1, 4]\nagg_weight = 0.4\n\
             dataset = {{ kind = \"gaussian_blobs\", points = {}, features = 2, labels = 3 }}\n",
            40 * devices
        ));
    }
    Experiment::build(parse_config(&text, &[]).expect("fixture parses")).expect("fixture is valid")
}

/// Exact quadratic constants with fixed V1, V2 and gap.
pub fn exact_constants(exp: &Experiment, v1: f64, v2: f64, gap: f64) -> Vec<BoundConstants> {
    exp.tasks
        .iter()
        .zip(&exp.scenario.tasks)
        .map(|(td, t)| quadratic_constants(&td.partitions, t.num_aggregations, t.reg_weight, v1, v2, gap))
        .collect()
}

/// Plan with the same `e` everywhere, the device's top frequency split across tasks and
/// either full or single-sample batches, with idle times assigned. None if infeasible.
pub fn uniform_plan(s: &Scenario, schedule: &Schedule, e: usize, full_batch: bool) -> Option<ResourcePlan> {
    let tasks = s.num_tasks() as f64;
    let mut plan = ResourcePlan {
        tasks: s
            .tasks
            .iter()
            .enumerate()
            .map(|(j, t)| TaskPlan {
                entries: s
                    .devices
                    .iter()
                    .map(|d| {
                        let entry = PlanEntry {
                            cpu_freq: (d.cpu_freq_bounds.1 / tasks).max(d.cpu_freq_bounds.0),
                            batch_size: if full_batch { d.dataset_sizes[j] } else { 1 },
                            sgd_iters: e,
                            idle: 0.0,
                        };
                        vec![entry; t.num_aggregations]
                    })
                    .collect(),
                final_idle: vec![0.0; s.num_devices()],
                e_min: e,
                e_max: e,
            })
            .collect(),
    };
    assign_idle_times(s, schedule, &mut plan).ok()?;
    plan.check(s, schedule).is_empty().then_some(plan)
}

/// Exact constants of quadratic task `j` for one run: V1 and V2 are the largest squared
/// gradient norms the run met and the gap is F(w^0) − F(w*) at the mean of device means.
pub fn observed_constants(exp: &Experiment, run: &RunOutput, j: usize) -> BoundConstants {
    let td = &exp.tasks[j];
    let t = &exp.scenario.tasks[j];
    let v1 = run.metrics.tasks[j].grad_norm.iter().copied().fold(0.0, f64::max);
    let v2 = run.traces[j]
        .iter()
        .flatten()
        .flatten()
        .flat_map(|tr| tr.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()))
        .fold(0.0, f64::max);
    let model = td.model();
    let means: Vec<Vec<f64>> = td.partitions.iter().map(|p| p.feature_mean()).collect();
    let mut star = vec![0.0; t.model_dim];
    for m in &means {
        for (a, x) in star.iter_mut().zip(m) {
            *a += x / means.len() as f64;
        }
    }
    let f = |w: Vec<f64>| global_loss(&ModelState { weights: w, task_id: j, version: 0 }, &td.partitions, model.as_ref()).unwrap();
    let gap = f(vec![0.0; t.model_dim]) - f(star);
    quadratic_constants(&td.partitions, t.num_aggregations, t.reg_weight, v1, v2, gap)
}

/// X by the nested product U^g R^g' Π_{k=g+1}^{g'-1} (1 − U^k), kept when g' − g ≤ K.
pub fn tensor_oracle(receive: &Indicator, upload: &Indicator, k_lim: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..upload.len() {
        let g_n = upload[i].len();
        for g in 0..g_n {
            for gp in g..g_n {
                let mut x = upload[i][g] && receive[i][gp];
                for k in g + 1..gp {
                    x = x && !upload[i][k];
                }
                if x && gp - g <= k_lim {
                    out.push((i, g, gp));
                }
            }
        }
    }
    out.sort();
    out
}

/// One random upload per aggregation, receptions by the lag-one tie.
pub fn random_tensor<R: Rng>(rng: &mut R, devices: usize, limits: ScheduleLimits) -> ScheduleTensor {
    let g_n = limits.num_aggregations;
    let mut upload = Indicator::new(devices, g_n);
    for g in 0..g_n {
        upload[rng.random_range(0..devices)][g] = true;
    }
    let receive = lagged_receptions(&upload, limits.staleness_limit);
    build_tensor(&receive, &upload, limits).expect("consistent shapes")
}

/// Random schedule and plan that pass every check, or None after `tries` attempts.
pub fn random_schedule_plan<R: Rng>(rng: &mut R, s: &Scenario, tries: usize) -> Option<(Schedule, ResourcePlan)> {
    let devices = s.num_devices();
    let tasks = s.num_tasks() as f64;
    for _ in 0..tries {
        let tensors: Vec<ScheduleTensor> = s
            .tasks
            .iter()
            .map(|t| {
                random_tensor(
                    rng,
                    devices,
                    ScheduleLimits { staleness_limit: t.staleness_limit, num_aggregations: t.num_aggregations },
                )
            })
            .collect();
        let schedule = Schedule { tasks: tensors };
        let mut plan_tasks = Vec::new();
        for (j, t) in s.tasks.iter().enumerate() {
            let (lo, hi) = s.sgd_count_bounds[j];
            let entries: Vec<Vec<PlanEntry>> = (0..devices)
                .map(|i| {
                    let d = &s.devices[i];
                    let (fmin, fmax) = d.cpu_freq_bounds;
                    let dsz = d.dataset_sizes[j];
                    (0..t.num_aggregations)
                        .map(|_| PlanEntry {
                            cpu_freq: rng.random_range(fmin..fmax / tasks).max(fmin),
                            batch_size: rng.random_range(1..=dsz),
                            sgd_iters: rng.random_range(lo as usize..=hi as usize),
                            idle: 0.0,
                        })
                        .collect()
                })
                .collect();
            let active: Vec<usize> = (0..devices)
                .flat_map(|i| (0..t.num_aggregations).map(move |g| (i, g)))
                .filter(|&(i, g)| schedule.tasks[j].upload[i][g])
                .map(|(i, g)| entries[i][g].sgd_iters)
                .collect();
            plan_tasks.push(TaskPlan {
                final_idle: vec![0.0; devices],
                e_min: *active.iter().min().unwrap_or(&(lo as usize)),
                e_max: *active.iter().max().unwrap_or(&(lo as usize)),
                entries,
            });
        }
        let mut plan = ResourcePlan { tasks: plan_tasks };
        if assign_idle_times(s, &schedule, &mut plan).is_err() || !plan.check(s, &schedule).is_empty() {
            continue;
        }
        let ok = (0..s.num_tasks()).all(|j| {
            let table = plan.period_table(s, &schedule, j).expect("periods");
            check_schedule(&schedule.tasks[j], Some(&table)).is_empty()
        });
        if ok {
            return Some((schedule, plan));
        }
    }
    None
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Best of a grid search over schedules and resources.
pub struct BruteForce {
    pub objective: f64,
    /// Schedules with at least one feasible grid plan.
    pub feasible: usize,
    pub schedule: Option<Schedule>,
    pub plan: Option<ResourcePlan>,
}

/// Best objective over every feasible schedule of a single-task scenario and a grid of
/// `levels` values per resource and dispatch.
pub fn brute_force(s: &Scenario, constants: &[BoundConstants], levels: usize) -> BruteForce {
    assert_eq!(s.num_tasks(), 1, "brute force handles one task");
    let t = &s.tasks[0];
    let devices = s.num_devices();
    let g_n = t.num_aggregations;
    let limits = ScheduleLimits { staleness_limit: t.staleness_limit, num_aggregations: g_n };
    let (lo, hi) = s.sgd_count_bounds[0];
    let mut best = BruteForce { objective: f64::INFINITY, feasible: 0, schedule: None, plan: None };
    for (receive, upload) in enumerate_feasible(devices, limits).expect("small instance") {
        let tensor = build_tensor(&receive, &upload, limits).expect("shapes");
        if tensor.entries.is_empty() || !check_schedule(&tensor, None).is_empty() {
            continue;
        }
        let schedule = Schedule { tasks: vec![tensor] };
        let dispatches: Vec<(usize, usize)> =
            (0..devices).flat_map(|i| (0..g_n).map(move |g| (i, g))).filter(|&(i, g)| upload[i][g]).collect();
        let grids: Vec<Vec<PlanEntry>> = dispatches
            .iter()
            .map(|&(i, _)| {
                let d = &s.devices[i];
                let mut v = Vec::new();
                for f in linspace(d.cpu_freq_bounds.0, d.cpu_freq_bounds.1, levels) {
                    for b in linspace(1.0, d.dataset_sizes[0] as f64, levels) {
                        for e in linspace(lo as f64, hi as f64, levels) {
                            v.push(PlanEntry { cpu_freq: f, batch_size: b.round() as usize, sgd_iters: e.round() as usize, idle: 0.0 });
                        }
                    }
                }
                v
            })
            .collect();
        let combos: usize = grids.iter().map(Vec::len).product();
        let mut any = false;
        for code in 0..combos {
            let mut entries: Vec<Vec<PlanEntry>> = (0..devices)
                .map(|i| {
                    vec![
                        PlanEntry { cpu_freq: s.devices[i].cpu_freq_bounds.0, batch_size: 1, sgd_iters: lo as usize, idle: 0.0 };
                        g_n
                    ]
                })
                .collect();
            let mut c = code;
            let mut iters = Vec::new();
            for (k, &(i, g)) in dispatches.iter().enumerate() {
                entries[i][g] = grids[k][c % grids[k].len()];
                c /= grids[k].len();
                iters.push(entries[i][g].sgd_iters);
            }
            let mut plan = ResourcePlan {
                tasks: vec![TaskPlan {
                    entries,
                    final_idle: vec![0.0; devices],
                    e_min: *iters.iter().min().expect("dispatches"),
                    e_max: *iters.iter().max().expect("dispatches"),
                }],
            };
            if assign_idle_times(s, &schedule, &mut plan).is_err() || !plan.check(s, &schedule).is_empty() {
                continue;
            }
            let table = plan.period_table(s, &schedule, 0).expect("periods");
            if !check_schedule(&schedule.tasks[0], Some(&table)).is_empty() {
                continue;
            }
            if let Ok(o) = objective_value(s, constants, &schedule, &plan) {
                any = true;
                if o < best.objective {
                    best.objective = o;
                    best.schedule = Some(schedule.clone());
                    best.plan = Some(plan);
                }
            }
        }
        best.feasible += usize::from(any);
    }
    best
}

/// Relative difference |a − b| / max(|a|, |b|, tiny).
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Spans (g, g') of one upload row with U^g Π_{k=g+1}^{g'-1} (1 − U^k) = 1 and g' − g ≤ K,
/// by the nested product. X of the row is these spans filtered by R^g'.
fn upload_spans(u: u32, g_n: usize, k_lim: usize, out: &mut Vec<(u8, u8)>) {
    let bit = |k: usize| u >> k & 1 == 1;
    for g in (0..g_n).filter(|&g| bit(g)) {
        for gp in g..g_n {
            let mut x = true;
            for k in g + 1..gp {
                x = x && !bit(k);
            }
            if x && gp - g <= k_lim {
                out.push((g as u8, gp as u8));
            }
        }
    }
}

/// Compare `build_tensor` with the nested-product oracle on every binary (R, U) of a
/// `devices` x `g_n` shape. X of device i only depends on row i of R and U, so the
/// upload factor is tabulated per row mask, and short rows tabulate X itself per
/// (R row, U row). Returns (pairs checked, first mismatch).
pub fn exhaustive_tensor_check(devices: usize, g_n: usize, k_lim: usize) -> (u64, Option<String>) {
    let cells = devices * g_n;
    assert!(cells <= 16, "shape too large");
    let mut spans = Vec::new();
    let mut bounds = vec![0];
    for u in 0..1u32 << g_n {
        upload_spans(u, g_n, k_lim, &mut spans);
        bounds.push(spans.len());
    }
    let full = g_n <= 8;
    let mut rows = Vec::new();
    let mut row_bounds = vec![0];
    if full {
        for r in 0..1usize << g_n {
            for u in 0..1usize << g_n {
                rows.extend(spans[bounds[u]..bounds[u + 1]].iter().filter(|&&(_, gp)| r >> gp & 1 == 1));
                row_bounds.push(rows.len());
            }
        }
    }
    let limits = ScheduleLimits { staleness_limit: k_lim, num_aggregations: g_n };
    let mut receive = Indicator::new(devices, g_n);
    let mut upload = Indicator::new(devices, g_n);
    let mut rmask = vec![0usize; devices];
    let mut umask = vec![0usize; devices];
    let total = 1u64 << (2 * cells);
    // Gray-code order flips one cell per step
    for step in 0..total {
        if step > 0 {
            let b = step.trailing_zeros() as usize;
            let (m, masks, cell) = if b < cells {
                (&mut receive, &mut rmask, b)
            } else {
                (&mut upload, &mut umask, b - cells)
            };
            let (i, g) = (cell / g_n, cell % g_n);
            m[i][g] = !m[i][g];
            masks[i] ^= 1 << g;
        }
        let x = build_tensor(&receive, &upload, limits).expect("shapes");
        let mut at = 0;
        let mut ok = true;
        for i in 0..devices {
            if full {
                let t = (rmask[i] << g_n) + umask[i];
                for &(g, gp) in &rows[row_bounds[t]..row_bounds[t + 1]] {
                    ok &= x.entries.get(at) == Some(&(i, g as usize, gp as usize));
                    at += 1;
                }
                continue;
            }
            for &(g, gp) in &spans[bounds[umask[i]]..bounds[umask[i] + 1]] {
                if rmask[i] >> gp & 1 == 1 {
                    ok &= x.entries.get(at) == Some(&(i, g as usize, gp as usize));
                    at += 1;
                }
            }
        }
        if !ok || at != x.entries.len() {
            return (step + 1, Some(format!("{devices}x{g_n} K={k_lim}: R={receive:?} U={upload:?} got {:?}", x.entries)));
        }
    }
    (total, None)
}

/// ‖a − b‖ / max(‖b‖, 1e-12).
pub fn grad_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-12)
}

pub fn sample(rng: &mut ChaCha8Rng, domain: &[(f64, f64)]) -> Vec<f64> {
    domain.iter().map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect()
}

/// One instance of every constraint family with hand-picked parameters.
pub fn hand_families() -> Vec<Family> {
    vec![
        Family::TensorConstruction { factors: 2 },
        Family::TensorConstruction { factors: 5 },
        Family::ComputeTime { kappa: 0.7, f_lo: 0.05, e_lo: 0.1, b_lo: 0.01 },
        Family::ComputeEnergy { kappa: 1.3, f_lo: 0.05, e_lo: 0.1, b_lo: 0.01 },
        Family::Gated,
        Family::UploadOrder { g: 0, devices: 2 },
        Family::UploadOrder { g: 3, devices: 3 },
        Family::Binary,
        Family::WindowSum { comm: vec![0.1, 0.2, 0.05], kappa: vec![0.3, 0.2, 0.4], f_lo: 0.1, e_lo: 0.1, b_lo: 0.02 },
        Family::EnergySum { comm: vec![0.1, 0.2], kappa: vec![0.6, 0.9], f_lo: 0.1, e_lo: 0.1, b_lo: 0.02 },
        Family::Linear { coeffs: vec![0.5, -1.0, 2.0], offset: -0.25 },
    ]
}

/// Worst (majorization shortfall, anchoring error, gradient error) over `pairs` draws.
pub fn majorization_errors(family: &Family, rng: &mut ChaCha8Rng, pairs: usize) -> (f64, f64, f64) {
    let domain = family.domain();
    let (mut short, mut anchor, mut grad) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..pairs {
        let vm = sample(rng, &domain);
        let v = sample(rng, &domain);
        let s = family.surrogate(&vm, 0.0);
        let value = family.value(&v);
        short = short.max(value - s.eval(&v) - 1e-12 * value.abs().max(1.0));
        anchor = anchor.max((s.eval(&vm) - family.value(&vm)).abs());
        let (_, ad) = gradient(family, &vm);
        let sg = s.gradient(&vm);
        grad = grad.max(sg.iter().zip(&ad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    (short, anchor, grad)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Worst relative error of the per-point and regularized mini-batch gradients against
/// central differences, over 100 random weights.
pub fn loss_gradient_error(kind: LossKind, features: usize, classes: usize, seed: u64) -> f64 {
    let model = kind.model(features, classes);
    let data = gaussian_blobs(40, features, classes, 2.0, 1.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let w = random_vec(&mut rng, model.dim(), 2.0);
        let p: &DataPoint = &data.points[rng.random_range(0..data.len())];
        let mut g = vec![0.0; model.dim()];
        model.add_grad(&w, p, 1.0, &mut g);
        let fd = finite_difference(|x| model.loss(x, p), &w, 1e-6);
        worst = worst.max(grad_rel_err(&g, &fd));

        // regularized objective over a mini-batch
        let w0 = random_vec(&mut rng, model.dim(), 1.0);
        let batch: Vec<&DataPoint> = data.points.iter().take(7).collect();
        let sub = LabeledDataset::new(batch.iter().map(|p| (*p).clone()).collect(), classes).unwrap();
        let g = regularized_gradient(&w, &w0, 0.3, model.as_ref(), &batch).unwrap();
        let fd = finite_difference(|x| regularized_loss(x, &w0, 0.3, model.as_ref(), &sub).unwrap(), &w, 1e-6);
        worst = worst.max(grad_rel_err(&g, &fd));
    }
    worst
}

/// Norms on a 1/1024 grid, so their sums are exact.
pub fn dyadic_norms(rng: &mut ChaCha8Rng, g_n: usize) -> Vec<f64> {
    (0..g_n).map(|_| rng.random_range(0..65536) as f64 / 1024.0).collect()
}

/// One entry per g with a random device and a random in-window g'.
pub fn one_activation(rng: &mut ChaCha8Rng, devices: usize, limits: ScheduleLimits) -> ScheduleTensor {
    let g_n = limits.num_aggregations;
    let triples: Vec<_> = (0..g_n)
        .map(|g| {
            let last = (g + limits.staleness_limit).min(g_n - 1);
            (rng.random_range(0..devices), g, rng.random_range(g..=last))
        })
        .collect();
    ScheduleTensor::from_triples(devices, limits, &triples).unwrap()
}

/// Largest relative drift of the step-scaled bound coefficients over e_min in {4, 8, 16}
/// with G = ζ e_min² and η = τ / e_min, and the largest relative gap between the scaled
/// and plain bound when e_max = e_min.
pub fn scaling_spread(seed: u64) -> (f64, f64) {
    let exp = quadratic_experiment(2, &[(4, 1)], seed);
    let c = exact_constants(&exp, 2.0, 3.0, 1.0);
    let sizes: Vec<usize> = exp.scenario.devices.iter().map(|d| d.dataset_sizes[0]).collect();
    let zeta = 0.25;
    let tau = [0.2];
    let mut reports = Vec::new();
    let mut plain_gap: f64 = 0.0;
    for e_min in [4usize, 8, 16] {
        let g_n = (zeta * (e_min * e_min) as f64) as usize;
        let mut task = exp.scenario.tasks[0].clone();
        task.num_aggregations = g_n;
        task.learning_rate_schedule = vec![tau[0] / e_min as f64];
        let limits = ScheduleLimits { staleness_limit: task.staleness_limit, num_aggregations: g_n };
        let schedule = round_robin(2, limits);
        let entry = PlanEntry { cpu_freq: 1e6, batch_size: 2, sgd_iters: e_min, idle: 0.0 };
        let plan = TaskPlan { entries: vec![vec![entry; g_n]; 2], final_idle: vec![0.0; 2], e_min, e_max: 2 * e_min };
        let mut cs = c[0].clone();
        cs.dissimilarity = vec![vec![cs.dissimilarity[0][0]; g_n]; 2];
        cs.sample_variance = vec![vec![cs.sample_variance[0][0]; g_n]; 2];
        reports.push(corollary2_scaling(&task, &sizes, &schedule, &plan, &cs, &tau, zeta).expect("scaling"));
        let mut same = plan.clone();
        same.e_max = e_min;
        let plain = eval_bound(&task, &sizes, &schedule, &same, &cs).expect("bound");
        let scaled = corollary2_scaling(&task, &sizes, &schedule, &same, &cs, &tau, zeta).expect("scaling");
        plain_gap = plain_gap.max(rel(plain.total, scaled.total));
    }
    let mut spread: f64 = 0.0;
    for p in 0..reports[0].pieces.len() {
        let base = reports[0].pieces[p].normalized;
        for r in &reports[1..] {
            spread = spread.max(rel(r.pieces[p].normalized, base));
        }
    }
    (spread, plain_gap)
}
