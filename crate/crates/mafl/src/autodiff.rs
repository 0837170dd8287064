//! Forward-mode algorithmic differentiation.
//!
//! Expressions are written once, generic over [`Real`], and evaluated either on
//! plain `f64` or on [`Dual`] numbers carrying `LANES` tangent directions. A full
//! gradient of an `n`-input function costs `ceil(n / LANES)` forward passes.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Number of tangent directions propagated per forward pass.
pub const LANES: usize = 16;

/// Scalar type usable inside differentiable expressions.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Value plus `N` directional derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// Independent variable seeded along tangent lane `lane`.
    pub fn variable(v: f64, lane: usize) -> Self {
        let mut d = [0.0; N];
        d[lane] = 1.0;
        Dual { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..N {
            self.d[k] += o.d[k];
        }
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..N {
            self.d[k] -= o.d[k];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = (self.d[k] - q * o.d[k]) * inv;
        }
        Dual { v: q, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.v = -self.v;
        for x in self.d.iter_mut() {
            *x = -*x;
        }
        self
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        // derivative at 0 is taken as 0 so that sqrt(0) stays finite
        let ds = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.chain(s, ds)
    }
    fn powi(self, n: i32) -> Self {
        let p = self.v.powi(n);
        let dp = if n == 0 { 0.0 } else { n as f64 * self.v.powi(n - 1) };
        self.chain(p, dp)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn scale(mut self, k: f64) -> Self {
        self.v *= k;
        for x in self.d.iter_mut() {
            *x *= k;
        }
        self
    }
}

/// A scalar function of a fixed number of inputs, generic over the number type.
pub trait Differentiable {
    fn eval<T: Real>(&self, x: &[T]) -> T;
}

/// Value and gradient of `f` at `x` by chunked forward passes.
pub fn gradient<F: Differentiable + ?Sized>(f: &F, x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        return (f.eval::<f64>(&[]), grad);
    }
    let mut value = 0.0;
    let mut buf: Vec<Dual<LANES>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut start = 0;
    while start < n {
        let end = (start + LANES).min(n);
        for k in start..end {
            buf[k] = Dual::variable(x[k], k - start);
        }
        let out = f.eval(&buf);
        value = out.v;
        grad[start..end].copy_from_slice(&out.d[..end - start]);
        for k in start..end {
            buf[k] = Dual::constant(x[k]);
        }
        start = end;
    }
    (value, grad)
}

/// Central finite-difference gradient, used as an oracle in tests and diagnostics.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            p[k] = x[k] + step;
            let up = f(&p);
            p[k] = x[k] - step;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosen;

    impl Differentiable for Rosen {
        fn eval<T: Real>(&self, x: &[T]) -> T {
            let mut s = T::zero();
            for k in 0..x.len() - 1 {
                let a = T::one() - x[k];
                let b = x[k + 1] - x[k] * x[k];
                s += a * a + b * b * T::cst(100.0);
            }
            s
        }
    }

    #[test]
    fn rosenbrock_gradient_matches_closed_form() {
        let x = vec![0.3, -1.2, 0.7, 2.0, 0.1];
        let (_, g) = gradient(&Rosen, &x);
        let mut exact = vec![0.0; x.len()];
        for k in 0..x.len() - 1 {
            exact[k] += -2.0 * (1.0 - x[k]) - 400.0 * x[k] * (x[k + 1] - x[k] * x[k]);
            exact[k + 1] += 200.0 * (x[k + 1] - x[k] * x[k]);
        }
        for (a, b) in g.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn more_inputs_than_lanes() {
        let x: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin()).collect();
        let (v, g) = gradient(&Rosen, &x);
        let fd = finite_difference(|p| Rosen.eval(p), &x, 1e-6);
        assert!((v - Rosen.eval(&x)).abs() < 1e-12);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn elementary_functions() {
        let x = Dual::<1>::variable(2.0, 0);
        assert!((x.sqrt().d[0] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((x.powi(3).d[0] - 12.0).abs() < 1e-12);
        assert!((x.exp().d[0] - 2f64.exp()).abs() < 1e-12);
        assert!((x.ln().d[0] - 0.5).abs() < 1e-15);
        assert!(((Dual::constant(1.0) / x).d[0] + 0.25).abs() < 1e-15);
    }
}
