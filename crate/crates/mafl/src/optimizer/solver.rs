//! Inner solver for one convexified subproblem and the outer damped update.
//!
//! For fixed multipliers the surrogate Lagrangian is a separable quadratic, so its
//! minimizer over the convex set is a weighted projection, computed exactly by
//! bisection on the shift of each sum group. Multipliers follow projected dual ascent.

use serde::{Deserialize, Serialize};

use super::families::Surrogate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaConfig {
    /// λ of the proximal objective surrogate.
    pub prox_weight: f64,
    /// Floor on the curvature of inequality surrogates.
    pub lipschitz_ie: f64,
    /// Floor on the curvature of equality surrogates.
    pub lipschitz_eq: f64,
    /// ε of the damped update.
    pub step: f64,
    pub max_outer_iters: usize,
    pub inner_iters: usize,
    pub inner_tolerance: f64,
    pub dual_step: f64,
    pub dual_cap: f64,
    pub binary_tolerance: f64,
    /// Stop once the largest coordinate change falls below this and the binary gap is met.
    pub step_tolerance: f64,
}

impl Default for ScaConfig {
    fn default() -> Self {
        ScaConfig {
            prox_weight: 1.0,
            lipschitz_ie: 0.0,
            lipschitz_eq: 0.0,
            step: 0.3,
            max_outer_iters: 300,
            inner_iters: 20,
            inner_tolerance: 1e-6,
            dual_step: 0.1,
            dual_cap: 1e4,
            binary_tolerance: 1e-3,
            step_tolerance: 1e-4,
        }
    }
}

impl ScaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.prox_weight > 0.0) {
            return Err("prox_weight must be positive".into());
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err("step must lie in (0, 1]".into());
        }
        if self.inner_iters == 0 || self.max_outer_iters == 0 {
            return Err("iteration limits must be positive".into());
        }
        if !(self.dual_step > 0.0) || !(self.dual_cap > 0.0) {
            return Err("dual_step and dual_cap must be positive".into());
        }
        Ok(())
    }
}

/// Multipliers: `lambda` for equality surrogates, `omega` (non-negative) for inequalities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Coordinates whose sum must lie in [lo, hi]. Groups are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SumGroup {
    pub indices: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
}

/// Box plus disjoint sum groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSet {
    pub bounds: Vec<(f64, f64)>,
    pub groups: Vec<SumGroup>,
}

impl ConvexSet {
    pub fn boxed(bounds: Vec<(f64, f64)>) -> Self {
        ConvexSet { bounds, groups: Vec::new() }
    }

    /// argmin Σ w_c (v_c − z_c)² over the set.
    pub fn project(&self, z: &[f64], w: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = z.iter().zip(&self.bounds).map(|(&x, &(lo, hi))| x.clamp(lo, hi)).collect();
        for grp in &self.groups {
            let at = |mu: f64| -> f64 {
                grp.indices
                    .iter()
                    .map(|&c| (z[c] - mu / w[c]).clamp(self.bounds[c].0, self.bounds[c].1))
                    .sum()
            };
            let s0 = at(0.0);
            let above = s0 > grp.hi;
            let target = if above {
                grp.hi
            } else if s0 < grp.lo {
                grp.lo
            } else {
                continue;
            };
            let span = grp
                .indices
                .iter()
                .map(|&c| w[c] * (z[c].abs() + self.bounds[c].0.abs().min(1e12) + self.bounds[c].1.abs().min(1e12) + 1.0))
                .fold(0.0, f64::max);
            let (mut lo, mut hi) = if above { (0.0, span) } else { (-span, 0.0) };
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if at(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mu = 0.5 * (lo + hi);
            for &c in &grp.indices {
                v[c] = (z[c] - mu / w[c]).clamp(self.bounds[c].0, self.bounds[c].1);
            }
        }
        v
    }

    /// Largest violation of the box and group sums.
    pub fn violation(&self, v: &[f64]) -> f64 {
        let mut m: f64 = 0.0;
        for (x, &(lo, hi)) in v.iter().zip(&self.bounds) {
            m = m.max(lo - x).max(x - hi);
        }
        for g in &self.groups {
            let s: f64 = g.indices.iter().map(|&c| v[c]).sum();
            m = m.max(g.lo - s).max(s - g.hi);
        }
        m
    }
}

/// One majorized constraint restricted to `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConstraint {
    pub support: Vec<usize>,
    pub surrogate: Surrogate,
    pub equality: bool,
}

impl SurrogateConstraint {
    fn local(&self, v: &[f64]) -> Vec<f64> {
        self.support.iter().map(|&c| v[c]).collect()
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.surrogate.eval(&self.local(v))
    }
}

/// Convexified subproblem at anchor v_m.
#[derive(Debug, Clone)]
pub struct SurrogateProblem<'a> {
    pub anchor: &'a [f64],
    pub objective_grad: &'a [f64],
    pub prox_weight: f64,
    pub constraints: &'a [SurrogateConstraint],
    pub set: &'a ConvexSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSolution {
    pub v: Vec<f64>,
    /// Largest surrogate constraint violation at `v`.
    pub residual: f64,
    pub exact: bool,
    pub iterations: usize,
}

fn minimize_for_duals(p: &SurrogateProblem, duals: &DualState) -> Vec<f64> {
    let n = p.anchor.len();
    let mut w = vec![p.prox_weight; n];
    let mut a = p.objective_grad.to_vec();
    let (mut ie, mut eq) = (0, 0);
    for c in p.constraints {
        let m = if c.equality {
            eq += 1;
            duals.lambda[eq - 1]
        } else {
            ie += 1;
            duals.omega[ie - 1]
        };
        if m == 0.0 {
            continue;
        }
        // an equality multiplier of either sign majorizes ±N, both with curvature L
        let curv = m.abs() * c.surrogate.curvature;
        for (k, &idx) in c.support.iter().enumerate() {
            w[idx] += curv;
            a[idx] += m * c.surrogate.grad[k];
        }
    }
    let z: Vec<f64> = (0..n).map(|c| p.anchor[c] - a[c] / w[c]).collect();
    p.set.project(&z, &w)
}

/// Dual ascent on the surrogate Lagrangian. Multipliers persist in `duals`.
pub fn solve_surrogate(p: &SurrogateProblem, duals: &mut DualState, config: &ScaConfig) -> SurrogateSolution {
    let n_eq = p.constraints.iter().filter(|c| c.equality).count();
    let n_ie = p.constraints.len() - n_eq;
    duals.lambda.resize(n_eq, 0.0);
    duals.omega.resize(n_ie, 0.0);
    let mut v = minimize_for_duals(p, duals);
    let mut residual = f64::INFINITY;
    for it in 0..config.inner_iters {
        let (mut ie, mut eq) = (0, 0);
        residual = 0.0;
        for c in p.constraints {
            let s = c.eval(&v);
            if c.equality {
                residual = residual.max(s.abs());
                let m = &mut duals.lambda[eq];
                *m = (*m + config.dual_step * s).clamp(-config.dual_cap, config.dual_cap);
                eq += 1;
            } else {
                residual = residual.max(s.max(0.0));
                let m = &mut duals.omega[ie];
                *m = (*m + config.dual_step * s).clamp(0.0, config.dual_cap);
                ie += 1;
            }
        }
        if residual <= config.inner_tolerance {
            return SurrogateSolution { v, residual, exact: true, iterations: it + 1 };
        }
        v = minimize_for_duals(p, duals);
    }
    SurrogateSolution { v, residual, exact: false, iterations: config.inner_iters }
}

/// v_m + ε (v̂ − v_m).
pub fn sca_step(v_m: &[f64], v_hat: &[f64], eps: f64) -> Vec<f64> {
    v_m.iter().zip(v_hat).map(|(a, b)| a + eps * (b - a)).collect()
}
