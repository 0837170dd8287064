//! Staleness-aware convergence bound: terms (a)–(e), the cumulative gradient measure,
//! the model-difference recursion and empirical constant estimation.
//!
//! The per-row terms and the staleness term are generic over [`Real`] so the
//! optimizer differentiates exactly the expressions evaluated here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Real;
use crate::data::LabeledDataset;
use crate::domain::TaskSpec;
use crate::plan::TaskPlan;
use crate::scheduling::ScheduleTensor;
use crate::trainer::{full_gradient, global_gradient, LossModel, ModelState, SgdTraces, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("minimum step size must be positive")]
    NonPositiveStep,
    #[error("task has no aggregations")]
    NoAggregations,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("device {device} at g={g} runs {iters} SGD iterations outside [{lo}, {hi}]")]
    SgdOutOfRange { device: usize, g: usize, iters: usize, lo: usize, hi: usize },
    #[error("no gradient norm for aggregation {0}")]
    MissingGradNorm(usize),
    #[error("no local trace for device {device} at g={g}")]
    MissingTrace { device: usize, g: usize },
    #[error("inconsistent model history: {0}")]
    InconsistentHistory(String),
    #[error("at least two probe points are required")]
    TooFewProbes,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Constants of one task. Matrices are indexed `[device][g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    pub smoothness: f64,
    pub data_variability: f64,
    pub dissimilarity: Vec<Vec<f64>>,
    pub sample_variance: Vec<Vec<f64>>,
    pub grad_norm_cap: f64,
    pub reg_grad_norm_cap: f64,
    pub reg_weight: f64,
    pub initial_loss_gap: f64,
}

impl BoundConstants {
    /// Every cap multiplied by `factor`; ρ and the loss gap are kept.
    pub fn inflated(&self, factor: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect();
        BoundConstants {
            smoothness: self.smoothness * factor,
            data_variability: self.data_variability * factor,
            dissimilarity: scale(&self.dissimilarity),
            sample_variance: scale(&self.sample_variance),
            grad_norm_cap: self.grad_norm_cap * factor,
            reg_grad_norm_cap: self.reg_grad_norm_cap * factor,
            reg_weight: self.reg_weight,
            initial_loss_gap: self.initial_loss_gap,
        }
    }

    fn check_shape(&self, devices: usize, g_n: usize) -> Result<(), BoundError> {
        for (name, m) in [("dissimilarity", &self.dissimilarity), ("sample_variance", &self.sample_variance)] {
            if m.len() != devices || m.iter().any(|r| r.len() < g_n) {
                return Err(BoundError::Shape(format!("{name} must be {devices} x {g_n}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AggregationTerms {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub term_a: f64,
    pub term_b: f64,
    pub term_c: f64,
    pub term_d: f64,
    pub term_e: f64,
    pub total: f64,
    pub lhs_conv: Option<f64>,
    /// Contributions of terms (b)–(e) attributed to each completed aggregation g'.
    pub per_aggregation: Vec<AggregationTerms>,
}

/// Σ_{k=0}^{g'-1} (kα)^k.
pub fn geometric_staleness_factor(k_alpha: f64, g_prime: usize) -> f64 {
    if g_prime == 0 {
        return 0.0;
    }
    if k_alpha == 1.0 {
        return g_prime as f64;
    }
    if k_alpha < 1.0 {
        // series form is exact and never cancels below one
        let mut s = 0.0;
        let mut p = 1.0;
        for _ in 0..g_prime {
            s += p;
            p *= k_alpha;
        }
        return s;
    }
    (k_alpha.powi(g_prime as i32) - 1.0) / (k_alpha - 1.0)
}

/// Inputs of one (device, g) row of the tensor. `weight` is Σ_{g'} X^{g,g'}.
#[derive(Debug, Clone, Copy)]
pub struct RowInput<T> {
    pub weight: T,
    pub sgd_iters: T,
    pub batch: T,
    pub eta: f64,
    pub dissimilarity: f64,
    pub sample_variance: f64,
    pub dataset_size: f64,
}

/// Row contributions to terms (b), (c) and the two pieces of (d).
#[derive(Debug, Clone, Copy)]
pub struct RowTerms<T> {
    pub b: T,
    pub c: T,
    /// ρ² η³ e (e−1) V2 piece of (d).
    pub d_quadratic: T,
    /// 2ρ η² e² V2 piece of (d).
    pub d_linear: T,
}

impl<T: Real> RowTerms<T> {
    pub fn d(&self) -> T {
        self.d_quadratic + self.d_linear
    }

    pub fn sum(&self) -> T {
        self.b + self.c + self.d()
    }
}

/// Sampling-variance factor (1 − B/D)(D−1)/(B D).
pub fn batch_variance_factor<T: Real>(batch: T, dataset_size: f64) -> T {
    let d = dataset_size;
    (T::one() - batch.scale(1.0 / d)) * T::cst((d - 1.0) / d) / batch
}

/// Row terms scaled by `inv` = 1/(G η_min).
pub fn row_terms<T: Real>(inv: f64, c: &BoundConstants, r: &RowInput<T>) -> RowTerms<T> {
    let we = r.weight * r.sgd_iters;
    let eta = r.eta;
    let rho = c.reg_weight;
    let v2 = c.reg_grad_norm_cap;
    let theta2 = c.data_variability * c.data_variability;
    let b = we.scale(inv * eta * r.dissimilarity);
    let cc = (we * batch_variance_factor(r.batch, r.dataset_size))
        .scale(inv * 4.0 * c.smoothness * eta * eta * theta2 * r.sample_variance);
    let d_quadratic = (we * (r.sgd_iters - T::one())).scale(inv * rho * rho * eta.powi(3) * v2);
    let d_linear = (we * r.sgd_iters).scale(inv * 2.0 * rho * eta * eta * v2);
    RowTerms { b, c: cc, d_quadratic, d_linear }
}

/// (sqrt piece, linear piece) of term (e) at a single g'.
pub fn staleness_pieces<T: Real>(task: &TaskSpec, c: &BoundConstants, e_max: T, g_prime: usize) -> (T, T) {
    let g_n = task.num_aggregations as f64;
    let inv = 1.0 / (g_n * task.eta_min());
    let ka = task.staleness_limit as f64 * task.agg_weight;
    let phi = geometric_staleness_factor(ka, g_prime);
    let eta_max = task.eta_max();
    // sqrt(4 kα e² η² V1 V2 φ) = 2 e η sqrt(kα V1 V2 φ)
    let sq = e_max.scale(inv * 2.0 * eta_max * (ka * c.grad_norm_cap * c.reg_grad_norm_cap * phi).sqrt());
    let lin = (e_max * e_max).scale(inv * (c.smoothness + 2.0) * ka * eta_max * eta_max * c.reg_grad_norm_cap * phi);
    (sq, lin)
}

/// Term (e) summed over every g'.
pub fn staleness_term<T: Real>(task: &TaskSpec, c: &BoundConstants, e_max: T) -> T {
    let mut total = T::zero();
    for gp in 0..task.num_aggregations {
        let (a, b) = staleness_pieces(task, c, e_max, gp);
        total += a + b;
    }
    total
}

/// Term (a).
pub fn loss_gap_term(task: &TaskSpec, c: &BoundConstants) -> f64 {
    2.0 * c.initial_loss_gap / (task.num_aggregations as f64 * task.agg_weight * task.eta_min())
}

fn check_task(task: &TaskSpec) -> Result<f64, BoundError> {
    if task.num_aggregations == 0 {
        return Err(BoundError::NoAggregations);
    }
    let eta_min = task.eta_min();
    if !(eta_min > 0.0) {
        return Err(BoundError::NonPositiveStep);
    }
    Ok(1.0 / (task.num_aggregations as f64 * eta_min))
}

/// Evaluate every term for a fixed schedule and plan. `dataset_sizes` are D_{i,j}.
pub fn eval_bound(
    task: &TaskSpec,
    dataset_sizes: &[usize],
    schedule: &ScheduleTensor,
    plan: &TaskPlan,
    constants: &BoundConstants,
) -> Result<BoundReport, BoundError> {
    let inv = check_task(task)?;
    let g_n = task.num_aggregations;
    let devices = schedule.num_devices();
    if schedule.num_aggregations() != g_n
        || plan.entries.len() != devices
        || plan.entries.iter().any(|r| r.len() != g_n)
        || dataset_sizes.len() != devices
    {
        return Err(BoundError::Shape(format!("schedule and plan must be {devices} x {g_n}")));
    }
    constants.check_shape(devices, g_n)?;

    let mut per = vec![AggregationTerms::default(); g_n];
    for &(i, g, gp) in &schedule.entries {
        let entry = &plan.entries[i][g];
        if entry.sgd_iters < plan.e_min || entry.sgd_iters > plan.e_max {
            return Err(BoundError::SgdOutOfRange {
                device: i,
                g,
                iters: entry.sgd_iters,
                lo: plan.e_min,
                hi: plan.e_max,
            });
        }
        let t = row_terms(
            inv,
            constants,
            &RowInput {
                weight: 1.0,
                sgd_iters: entry.sgd_iters as f64,
                batch: entry.batch_size as f64,
                eta: task.eta(g),
                dissimilarity: constants.dissimilarity[i][g],
                sample_variance: constants.sample_variance[i][g],
                dataset_size: dataset_sizes[i] as f64,
            },
        );
        per[gp].b += t.b;
        per[gp].c += t.c;
        per[gp].d += t.d();
    }
    for (gp, p) in per.iter_mut().enumerate() {
        let (a, b) = staleness_pieces(task, constants, plan.e_max as f64, gp);
        p.e = a + b;
    }
    let term_a = loss_gap_term(task, constants);
    let term_b: f64 = per.iter().map(|p| p.b).sum();
    let term_c: f64 = per.iter().map(|p| p.c).sum();
    let term_d: f64 = per.iter().map(|p| p.d).sum();
    let term_e: f64 = per.iter().map(|p| p.e).sum();
    Ok(BoundReport {
        term_a,
        term_b,
        term_c,
        term_d,
        term_e,
        total: term_a + term_b + term_c + term_d + term_e,
        lhs_conv: None,
        per_aggregation: per,
    })
}

/// (1/G) Σ_{(i,g,g')} grad_norms[g].
pub fn eval_conv_lhs(grad_norms: &[f64], schedule: &ScheduleTensor) -> Result<f64, BoundError> {
    let g_n = schedule.num_aggregations();
    if g_n == 0 {
        return Err(BoundError::NoAggregations);
    }
    let mut s = 0.0;
    for &(_, g, _) in &schedule.entries {
        s += *grad_norms.get(g).ok_or(BoundError::MissingGradNorm(g))?;
    }
    Ok(s / g_n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_abs_diff: f64,
}

/// Compare w^(g) − w^(g') from `history` with the recursion built from local traces only.
///
/// With a_i^(k) the accumulated local step, the recursion is
/// Ψ^{g,g'} = α Σ_{k'=g}^{g'-1} Σ_{k≤k'} Σ_i X^{k,k'} (a_i^(k) − Ψ^{k,k'}), Ψ^{g,g} = 0.
pub fn lemma1_check(
    schedule: &ScheduleTensor,
    traces: &SgdTraces,
    history: &[ModelState],
    alpha: f64,
    g: usize,
    g_prime: usize,
) -> Result<Lemma1Report, BoundError> {
    if g > g_prime {
        return Err(BoundError::InconsistentHistory(format!("g={g} exceeds g'={g_prime}")));
    }
    if history.len() <= g_prime {
        return Err(BoundError::InconsistentHistory(format!(
            "{} snapshots cannot cover aggregation {g_prime}",
            history.len()
        )));
    }
    for (k, m) in history.iter().enumerate() {
        if m.version != k {
            return Err(BoundError::InconsistentHistory(format!("snapshot {k} has version {}", m.version)));
        }
    }
    let dim = history[0].weights.len();
    let lhs: Vec<f64> = history[g].weights.iter().zip(&history[g_prime].weights).map(|(a, b)| a - b).collect();

    // psi[k][k'] for k ≤ k' ≤ g', built by increasing k'
    let mut psi = vec![vec![Vec::<f64>::new(); g_prime + 1]; g_prime + 1];
    for (k, row) in psi.iter_mut().enumerate() {
        row[k] = vec![0.0; dim];
    }
    for kp in 0..g_prime {
        // increment of w^(k'+1) − w^(k') expressed through traces and Ψ^{·,k'}
        let mut inc = vec![0.0; dim];
        for (i, k) in schedule.arrivals(kp) {
            let tr = traces
                .get(i)
                .and_then(|r| r.get(k))
                .and_then(Option::as_ref)
                .ok_or(BoundError::MissingTrace { device: i, g: k })?;
            let a = tr.accumulated_step();
            for d in 0..dim {
                inc[d] += alpha * (a[d] - psi[k][kp][d]);
            }
        }
        for k in 0..=kp {
            let next: Vec<f64> = psi[k][kp].iter().zip(&inc).map(|(p, v)| p + v).collect();
            psi[k][kp + 1] = next;
        }
    }
    let rhs = psi[g][g_prime].clone();
    let max_abs_diff = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Lemma1Report { lhs, rhs, max_abs_diff })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimate {
    /// Empirical maxima over probes: lower bounds of the true suprema.
    pub constants: BoundConstants,
    pub warnings: Vec<String>,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Probe-based estimates of the constants for any loss.
///
/// Probes are uniform in a box whose half-width is the largest absolute feature value.
/// The loss gap uses F(0) − 0, which caps the true gap for non-negative losses.
pub fn estimate_constants(
    loss: &dyn LossModel,
    partitions: &[LabeledDataset],
    num_aggregations: usize,
    reg_weight: f64,
    probe_points: usize,
    seed: u64,
) -> Result<ConstantEstimate, BoundError> {
    if probe_points < 2 {
        return Err(BoundError::TooFewProbes);
    }
    if partitions.is_empty() || partitions.iter().any(LabeledDataset::is_empty) {
        return Err(BoundError::Train(TrainError::EmptyData));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = loss.dim();
    let radius = partitions
        .iter()
        .flat_map(|p| p.points.iter().flat_map(|d| d.features.iter().map(|x| x.abs())))
        .fold(1.0, f64::max);
    let probes: Vec<Vec<f64>> = (0..probe_points)
        .map(|_| (0..dim).map(|_| rng.random_range(-radius..=radius)).collect())
        .collect();

    let mut warnings = Vec::new();
    let mut beta: f64 = 0.0;
    let mut theta: f64 = 0.0;
    let mut v1: f64 = 0.0;
    let mut v2: f64 = 0.0;
    let mut delta = vec![0.0f64; partitions.len()];
    let global: Vec<Vec<f64>> =
        probes.iter().map(|w| global_gradient(w, partitions, loss)).collect::<Result<_, _>>()?;
    for gv in &global {
        v1 = v1.max(norm_sq(gv));
    }
    let mut any_pair = false;
    for (i, part) in partitions.iter().enumerate() {
        let local: Vec<Vec<f64>> = probes.iter().map(|w| full_gradient(w, loss, part)).collect();
        for k in 0..probe_points {
            let next = (k + 1) % probe_points;
            let dw = norm_sq(&diff(&probes[k], &probes[next])).sqrt();
            if dw > 0.0 {
                beta = beta.max(norm_sq(&diff(&local[k], &local[next])).sqrt() / dw);
            }
            delta[i] = delta[i].max(norm_sq(&diff(&global[k], &local[k])));
            // regularized gradient anchored at the neighbouring probe
            let reg: Vec<f64> = local[k]
                .iter()
                .zip(probes[k].iter().zip(&probes[next]))
                .map(|(gv, (a, b))| gv + reg_weight * (a - b))
                .collect();
            v2 = v2.max(norm_sq(&reg));
            if part.len() >= 2 {
                let p = rng.random_range(0..part.len());
                let mut q = rng.random_range(0..part.len() - 1);
                if q >= p {
                    q += 1;
                }
                let (dp, dq) = (&part.points[p], &part.points[q]);
                let dx = norm_sq(&diff(&dp.features, &dq.features)).sqrt();
                if dx > 0.0 {
                    let mut gp = vec![0.0; dim];
                    let mut gq = vec![0.0; dim];
                    loss.add_grad(&probes[k], dp, 1.0, &mut gp);
                    loss.add_grad(&probes[k], dq, 1.0, &mut gq);
                    theta = theta.max(norm_sq(&diff(&gp, &gq)).sqrt() / dx);
                    any_pair = true;
                }
            }
        }
    }
    if !any_pair {
        warnings.push("no distinct data pair found; data variability set to 0".to_string());
    }
    let zero = ModelState::zeros(dim, 0);
    let gap = crate::trainer::global_loss(&zero, partitions, loss)?;
    let repeat = |v: f64| vec![v; num_aggregations];
    Ok(ConstantEstimate {
        constants: BoundConstants {
            smoothness: beta,
            data_variability: theta,
            dissimilarity: delta.iter().map(|&d| repeat(d)).collect(),
            sample_variance: partitions.iter().map(|p| repeat(p.feature_variance())).collect(),
            grad_norm_cap: v1,
            reg_grad_norm_cap: v2,
            reg_weight,
            initial_loss_gap: gap,
        },
        warnings,
    })
}

/// Closed-form constants of the quadratic loss ½‖w − x‖² on the given partitions.
///
/// β = Θ = 1, δ_i = ‖μ − μ_i‖² with μ the mean of device means, S̃_i the sample variance.
/// The gradient caps and loss gap come from elsewhere (observed trajectories).
pub fn quadratic_constants(
    partitions: &[LabeledDataset],
    num_aggregations: usize,
    reg_weight: f64,
    grad_norm_cap: f64,
    reg_grad_norm_cap: f64,
    initial_loss_gap: f64,
) -> BoundConstants {
    let means: Vec<Vec<f64>> = partitions.iter().map(LabeledDataset::feature_mean).collect();
    let dim = means.first().map_or(0, Vec::len);
    let mut mu = vec![0.0; dim];
    for m in &means {
        for (a, x) in mu.iter_mut().zip(m) {
            *a += x / means.len() as f64;
        }
    }
    BoundConstants {
        smoothness: 1.0,
        data_variability: 1.0,
        dissimilarity: means.iter().map(|m| vec![norm_sq(&diff(&mu, m)); num_aggregations]).collect(),
        sample_variance: partitions.iter().map(|p| vec![p.feature_variance(); num_aggregations]).collect(),
        grad_norm_cap,
        reg_grad_norm_cap,
        reg_weight,
        initial_loss_gap,
    }
}

/// One piece of the step-size-scaled bound: raw value = coefficient × inner sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPiece {
    pub name: &'static str,
    pub raw: f64,
    pub inner: f64,
    pub coefficient: f64,
    /// Coefficient multiplied back by its e_min / e_max powers; independent of e_min.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub e_min: usize,
    pub pieces: Vec<ScalingPiece>,
    pub total: f64,
}

/// Evaluate the bound under η^(g) = τ^(g)/e_min and G = ζ e_min², split into the
/// pieces of the asymptotic form. With e_min = 1, ζ = G and τ = η it equals [`eval_bound`].
pub fn corollary2_scaling(
    task: &TaskSpec,
    dataset_sizes: &[usize],
    schedule: &ScheduleTensor,
    plan: &TaskPlan,
    constants: &BoundConstants,
    tau: &[f64],
    zeta: f64,
) -> Result<ScalingReport, BoundError> {
    if tau.is_empty() || tau.iter().any(|&t| !(t > 0.0)) {
        return Err(BoundError::NonPositiveStep);
    }
    let g_n = schedule.num_aggregations();
    if plan.entries.len() != schedule.num_devices() || dataset_sizes.len() != schedule.num_devices() {
        return Err(BoundError::Shape("plan and dataset sizes must match the schedule".into()));
    }
    constants.check_shape(schedule.num_devices(), g_n)?;
    let em = plan.e_min as f64;
    let ex = plan.e_max as f64;
    let tau_at = |g: usize| tau[g.min(tau.len() - 1)];
    let tau_min = (0..g_n).map(tau_at).fold(f64::INFINITY, f64::min);
    let tau_max = (0..g_n).map(tau_at).fold(0.0, f64::max);
    let big_g = zeta * em * em;
    let inv = 1.0 / (big_g * tau_min / em);
    let c = constants;
    let theta2 = c.data_variability.powi(2);
    let (rho, v2) = (c.reg_weight, c.reg_grad_norm_cap);

    // raw sums carry the step sizes; inner sums follow the asymptotic form
    let (mut rb, mut ib, mut rc, mut ic, mut rq, mut iq, mut rl, mut il) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(i, g, _) in &schedule.entries {
        let e = plan.entries[i][g].sgd_iters as f64;
        let bsz = plan.entries[i][g].batch_size as f64;
        let eta = tau_at(g) / em;
        let var = batch_variance_factor(bsz, dataset_sizes[i] as f64) * theta2 * c.sample_variance[i][g];
        rb += eta * e * c.dissimilarity[i][g];
        ib += e * c.dissimilarity[i][g];
        rc += eta * eta * e * var;
        ic += e * var;
        rq += eta.powi(3) * e * v2 * (e - 1.0);
        iq += e * v2 * (e - 1.0);
        rl += eta * eta * e * e * v2;
        il += e * e * v2;
    }
    let ka = task.staleness_limit as f64 * task.agg_weight;
    let eta_max = tau_max / em;
    let (mut rs, mut is, mut rlin, mut ilin) = (0.0, 0.0, 0.0, 0.0);
    for gp in 0..g_n {
        let phi = geometric_staleness_factor(ka, gp);
        let s = (4.0 * ka * c.grad_norm_cap * v2 * phi).sqrt();
        let l = (c.smoothness + 2.0) * ka * v2 * phi;
        rs += ex * eta_max * s;
        is += s;
        rlin += ex * ex * eta_max * eta_max * l;
        ilin += l;
    }
    let raw = [
        ("loss_gap", 2.0 * inv / task.agg_weight * c.initial_loss_gap, c.initial_loss_gap, 1.0, 0.0),
        ("dissimilarity", inv * rb, ib, 2.0, 0.0),
        ("batch_variance", 4.0 * c.smoothness * inv * rc, ic, 3.0, 0.0),
        ("prox_quadratic", rho * rho * inv * rq, iq, 4.0, 0.0),
        ("prox_linear", 2.0 * rho * inv * rl, il, 3.0, 0.0),
        ("staleness_sqrt", inv * rs, is, 2.0, 1.0),
        ("staleness_linear", inv * rlin, ilin, 3.0, 2.0),
    ];
    let pieces: Vec<ScalingPiece> = raw
        .iter()
        .map(|&(name, raw, inner, p_min, p_max)| {
            let coefficient = if inner != 0.0 { raw / inner } else { 0.0 };
            ScalingPiece { name, raw, inner, coefficient, normalized: coefficient * em.powf(p_min) / ex.powf(p_max) }
        })
        .collect();
    let total = pieces.iter().map(|p| p.raw).sum();
    Ok(ScalingReport { e_min: plan.e_min, pieces, total })
}
