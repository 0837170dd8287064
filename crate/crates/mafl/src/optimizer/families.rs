//! Nonconvex constraint families with analytic curvature bounds, and the quadratic
//! surrogates built from them.
//!
//! Each family is written once over [`Real`]. `lipschitz` bounds the spectral norm of
//! the Hessian over `domain` (Gershgorin row sums), so the surrogate
//! N(v_m) + ∇N(v_m)ᵀ(v − v_m) + (L/2)‖v − v_m‖² majorizes the family on its domain.

use crate::autodiff::{gradient, Differentiable, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// x0 · x1 · Π_{k≥2} (1 − x_k): one entry of the scheduling tensor.
    TensorConstruction { factors: usize },
    /// κ u e b / f over inputs [u, f, b, e].
    ComputeTime { kappa: f64, f_lo: f64, e_lo: f64, b_lo: f64 },
    /// κ u e b f² over inputs [u, f, b, e].
    ComputeEnergy { kappa: f64, f_lo: f64, e_lo: f64, b_lo: f64 },
    /// u · t: a gated period or idle time.
    Gated,
    /// Σ_i [u_i^g Σ_{k<g} p_i^k − u_i^{g+1} Σ_{k≤g} p_i^k] over per-device inputs
    /// [u^g, u^{g+1}, p^0 .. p^g].
    UploadOrder { g: usize, devices: usize },
    /// u (1 − u).
    Binary,
    /// Σ_g [u_g c_g + κ_g u_g e_g b_g / f_g] − 1 over blocks [u, f, b, e].
    WindowSum { comm: Vec<f64>, kappa: Vec<f64>, f_lo: f64, e_lo: f64, b_lo: f64 },
    /// Σ_g [u_g c_g + κ_g u_g e_g b_g f_g²] − 1 over blocks [u, f, b, e].
    EnergySum { comm: Vec<f64>, kappa: Vec<f64>, f_lo: f64, e_lo: f64, b_lo: f64 },
    /// aᵀx + c.
    Linear { coeffs: Vec<f64>, offset: f64 },
}

fn time_curvature(kappa: f64, f_lo: f64) -> f64 {
    let fl = f_lo;
    kappa * (3.0 / (fl * fl) + 2.0 / fl.powi(3)).max(2.0 / fl + 1.0 / (fl * fl))
}

impl Family {
    pub fn dim(&self) -> usize {
        match self {
            Family::TensorConstruction { factors } => *factors,
            Family::ComputeTime { .. } | Family::ComputeEnergy { .. } => 4,
            Family::Gated => 2,
            Family::UploadOrder { g, devices } => devices * (g + 3),
            Family::Binary => 1,
            Family::WindowSum { comm, .. } | Family::EnergySum { comm, .. } => 4 * comm.len(),
            Family::Linear { coeffs, .. } => coeffs.len(),
        }
    }

    /// Bound on the Hessian spectral norm over [`Family::domain`].
    pub fn lipschitz(&self) -> f64 {
        match self {
            Family::TensorConstruction { factors } => factors.saturating_sub(1) as f64,
            Family::ComputeTime { kappa, f_lo, .. } => time_curvature(*kappa, *f_lo),
            Family::ComputeEnergy { kappa, .. } => 8.0 * kappa,
            Family::Gated => 1.0,
            Family::UploadOrder { g, .. } => (*g as f64 + 1.0).max(2.0),
            Family::Binary => 2.0,
            Family::WindowSum { kappa, f_lo, .. } => {
                kappa.iter().map(|&k| time_curvature(k, *f_lo)).fold(0.0, f64::max)
            }
            Family::EnergySum { kappa, .. } => kappa.iter().map(|&k| 8.0 * k).fold(0.0, f64::max),
            Family::Linear { .. } => 0.0,
        }
    }

    /// Box on which [`Family::lipschitz`] is valid.
    pub fn domain(&self) -> Vec<(f64, f64)> {
        let block = |f_lo: f64, e_lo: f64, b_lo: f64| [(0.0, 1.0), (f_lo, 1.0), (b_lo, 1.0), (e_lo, 1.0)];
        match self {
            Family::ComputeTime { f_lo, e_lo, b_lo, .. } | Family::ComputeEnergy { f_lo, e_lo, b_lo, .. } => {
                block(*f_lo, *e_lo, *b_lo).to_vec()
            }
            Family::WindowSum { comm, f_lo, e_lo, b_lo, .. } | Family::EnergySum { comm, f_lo, e_lo, b_lo, .. } => {
                comm.iter().flat_map(|_| block(*f_lo, *e_lo, *b_lo)).collect()
            }
            Family::Linear { coeffs, .. } => vec![(-1.0, 1.0); coeffs.len()],
            _ => vec![(0.0, 1.0); self.dim()],
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }

    /// Quadratic majorizer anchored at `anchor`, with curvature at least `floor`.
    pub fn surrogate(&self, anchor: &[f64], floor: f64) -> Surrogate {
        let (value, grad) = gradient(self, anchor);
        Surrogate { anchor: anchor.to_vec(), value, grad, curvature: self.lipschitz().max(floor) }
    }
}

impl Differentiable for Family {
    fn eval<T: Real>(&self, x: &[T]) -> T {
        match self {
            Family::TensorConstruction { factors } => {
                let mut p = T::one();
                for (k, &v) in x.iter().take(*factors).enumerate() {
                    p = p * if k < 2 { v } else { T::one() - v };
                }
                p
            }
            Family::ComputeTime { kappa, .. } => (x[0] * x[3] * x[2] / x[1]).scale(*kappa),
            Family::ComputeEnergy { kappa, .. } => (x[0] * x[3] * x[2] * x[1] * x[1]).scale(*kappa),
            Family::Gated => x[0] * x[1],
            Family::UploadOrder { g, devices } => {
                let w = g + 3;
                let mut s = T::zero();
                for i in 0..*devices {
                    let b = &x[i * w..(i + 1) * w];
                    let mut before = T::zero();
                    for k in 0..*g {
                        before += b[2 + k];
                    }
                    let through = before + b[2 + g];
                    s += b[0] * before - b[1] * through;
                }
                s
            }
            Family::Binary => x[0] * (T::one() - x[0]),
            Family::WindowSum { comm, kappa, .. } => {
                let mut s = T::cst(-1.0);
                for (g, (&c, &k)) in comm.iter().zip(kappa).enumerate() {
                    let b = &x[4 * g..4 * g + 4];
                    s += b[0].scale(c) + (b[0] * b[3] * b[2] / b[1]).scale(k);
                }
                s
            }
            Family::EnergySum { comm, kappa, .. } => {
                let mut s = T::cst(-1.0);
                for (g, (&c, &k)) in comm.iter().zip(kappa).enumerate() {
                    let b = &x[4 * g..4 * g + 4];
                    s += b[0].scale(c) + (b[0] * b[3] * b[2] * b[1] * b[1]).scale(k);
                }
                s
            }
            Family::Linear { coeffs, offset } => {
                let mut s = T::cst(*offset);
                for (&a, &v) in coeffs.iter().zip(x) {
                    s += v.scale(a);
                }
                s
            }
        }
    }
}

/// N(v_m) + ∇N(v_m)ᵀ(v − v_m) + (L/2)‖v − v_m‖².
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub anchor: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub curvature: f64,
}

impl Surrogate {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = self.value;
        for k in 0..x.len() {
            let d = x[k] - self.anchor[k];
            s += self.grad[k] * d + 0.5 * self.curvature * d * d;
        }
        s
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|k| self.grad[k] + self.curvature * (x[k] - self.anchor[k])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_surrogate_at_half() {
        let s = Family::Binary.surrogate(&[0.5], 0.0);
        assert!((s.eval(&[0.0]) - 0.5).abs() < 1e-15);
        assert!((s.eval(&[0.5]) - 0.25).abs() < 1e-15);
        assert!((s.eval(&[0.8]) - (0.25 + 0.09)).abs() < 1e-12);
    }

    #[test]
    fn affine_member_only_gains_curvature() {
        let f = Family::Linear { coeffs: vec![2.0, -1.0], offset: 0.5 };
        let s = f.surrogate(&[0.1, 0.2], 3.0);
        let x = [0.4, -0.3];
        let d2 = 0.3f64.powi(2) + 0.5f64.powi(2);
        assert!((s.eval(&x) - (f.value(&x) + 1.5 * d2)).abs() < 1e-12);
    }

    #[test]
    fn dims_match_domains() {
        let fams = [
            Family::TensorConstruction { factors: 4 },
            Family::ComputeTime { kappa: 1.0, f_lo: 0.1, e_lo: 0.2, b_lo: 0.1 },
            Family::UploadOrder { g: 2, devices: 3 },
            Family::WindowSum { comm: vec![0.1; 3], kappa: vec![1.0; 3], f_lo: 0.1, e_lo: 0.2, b_lo: 0.1 },
        ];
        for f in &fams {
            assert_eq!(f.domain().len(), f.dim());
        }
    }
}
