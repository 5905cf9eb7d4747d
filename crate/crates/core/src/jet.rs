//! Forward-mode automatic differentiation up to second order.
//!
//! Hamiltonians and forcings are written once, generically over [`Scalar`],
//! and evaluated with `f64` for values, [`Dual`] for gradients and
//! [`HyperDual`] for Hessians.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Largest number of independent variables a jet can carry.
pub const MAX_VARS: usize = 16;

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Highest derivative order carried (0 for plain values).
    const ORDER: usize;

    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;

    /// Applies a univariate function given its value and first two derivatives
    /// at `self.value()`.
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self;

    /// Applies a multivariate function given its value, gradient and row-major
    /// Hessian at the argument values.
    fn compose(args: &[Self], f0: f64, grad: &[f64], hess: &[f64]) -> Self;

    fn sqrt(&self) -> Self {
        let v = self.value();
        let s = v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * v))
    }

    fn recip(&self) -> Self {
        let v = self.value();
        self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }

    fn sin(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.chain(s, c, -s)
    }

    fn cos(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.chain(c, -s, -c)
    }

    fn powi(&self, k: i32) -> Self {
        let v = self.value();
        match k {
            0 => Self::cst(1.0),
            1 => self.clone(),
            _ => {
                let kf = k as f64;
                self.chain(v.powi(k), kf * v.powi(k - 1), kf * (kf - 1.0) * v.powi(k - 2))
            }
        }
    }

    fn atan2(y: &Self, x: &Self) -> Self {
        let (yv, xv) = (y.value(), x.value());
        let r2 = xv * xv + yv * yv;
        let r4 = r2 * r2;
        let grad = [xv / r2, -yv / r2];
        let hess = [
            -2.0 * xv * yv / r4,
            (yv * yv - xv * xv) / r4,
            (yv * yv - xv * xv) / r4,
            2.0 * xv * yv / r4,
        ];
        Self::compose(&[y.clone(), x.clone()], yv.atan2(xv), &grad, &hess)
    }
}

/// Squared Euclidean norm of a slice of scalars.
pub fn norm_sq<S: Scalar>(x: &[S]) -> S {
    x.iter().fold(S::cst(0.0), |acc, xi| acc + xi.clone() * xi.clone())
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::cst(0.0), |acc, (x, y)| acc + x.clone() * y.clone())
}

impl Scalar for f64 {
    const ORDER: usize = 0;
    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn chain(&self, f0: f64, _f1: f64, _f2: f64) -> Self {
        f0
    }
    fn compose(_args: &[Self], f0: f64, _grad: &[f64], _hess: &[f64]) -> Self {
        f0
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn powi(&self, k: i32) -> Self {
        f64::powi(*self, k)
    }
    fn atan2(y: &Self, x: &Self) -> Self {
        y.atan2(*x)
    }
}

/// Value and gradient.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub n: usize,
    pub v: f64,
    pub g: [f64; MAX_VARS],
}

impl Dual {
    pub fn var(v: f64, i: usize, n: usize) -> Self {
        assert!(n <= MAX_VARS, "too many variables for a jet");
        let mut g = [0.0; MAX_VARS];
        g[i] = 1.0;
        Dual { n, v, g }
    }

    pub fn vars(x: &[f64]) -> Vec<Self> {
        x.iter().enumerate().map(|(i, &v)| Self::var(v, i, x.len())).collect()
    }

    pub fn grad(&self, n: usize) -> Vec<f64> {
        self.g[..n].to_vec()
    }
}

/// Value, gradient and Hessian.
#[derive(Clone, Copy, Debug)]
pub struct HyperDual {
    pub n: usize,
    pub v: f64,
    pub g: [f64; MAX_VARS],
    pub h: [f64; MAX_VARS * MAX_VARS],
}

impl HyperDual {
    pub fn var(v: f64, i: usize, n: usize) -> Self {
        assert!(n <= MAX_VARS, "too many variables for a jet");
        let mut g = [0.0; MAX_VARS];
        g[i] = 1.0;
        HyperDual { n, v, g, h: [0.0; MAX_VARS * MAX_VARS] }
    }

    pub fn vars(x: &[f64]) -> Vec<Self> {
        x.iter().enumerate().map(|(i, &v)| Self::var(v, i, x.len())).collect()
    }

    pub fn grad(&self, n: usize) -> Vec<f64> {
        self.g[..n].to_vec()
    }

    /// Row-major `n x n` Hessian.
    pub fn hess(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n..(i + 1) * n].copy_from_slice(&self.h[i * MAX_VARS..i * MAX_VARS + n]);
        }
        out
    }
}

impl Scalar for Dual {
    const ORDER: usize = 1;
    fn cst(v: f64) -> Self {
        Dual { n: 0, v, g: [0.0; MAX_VARS] }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn chain(&self, f0: f64, f1: f64, _f2: f64) -> Self {
        let mut out = Dual { n: self.n, v: f0, g: [0.0; MAX_VARS] };
        for i in 0..self.n {
            out.g[i] = f1 * self.g[i];
        }
        out
    }
    fn compose(args: &[Self], f0: f64, grad: &[f64], _hess: &[f64]) -> Self {
        let n = args.iter().map(|a| a.n).max().unwrap_or(0);
        let mut out = Dual { n, v: f0, g: [0.0; MAX_VARS] };
        for (a, &d) in args.iter().zip(grad) {
            for i in 0..a.n {
                out.g[i] += d * a.g[i];
            }
        }
        out
    }
}

impl Scalar for HyperDual {
    const ORDER: usize = 2;
    fn cst(v: f64) -> Self {
        HyperDual { n: 0, v, g: [0.0; MAX_VARS], h: [0.0; MAX_VARS * MAX_VARS] }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let n = self.n;
        let mut out = HyperDual { n, v: f0, g: [0.0; MAX_VARS], h: [0.0; MAX_VARS * MAX_VARS] };
        for i in 0..n {
            out.g[i] = f1 * self.g[i];
            for j in 0..n {
                let k = i * MAX_VARS + j;
                out.h[k] = f1 * self.h[k] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }
    fn compose(args: &[Self], f0: f64, grad: &[f64], hess: &[f64]) -> Self {
        let m = args.len();
        let n = args.iter().map(|a| a.n).max().unwrap_or(0);
        let mut out = HyperDual { n, v: f0, g: [0.0; MAX_VARS], h: [0.0; MAX_VARS * MAX_VARS] };
        for (a, &d) in args.iter().zip(grad) {
            for i in 0..a.n {
                out.g[i] += d * a.g[i];
                for j in 0..a.n {
                    out.h[i * MAX_VARS + j] += d * a.h[i * MAX_VARS + j];
                }
            }
        }
        for p in 0..m {
            for q in 0..m {
                let c = hess[p * m + q];
                if c == 0.0 {
                    continue;
                }
                let (a, b) = (&args[p], &args[q]);
                for i in 0..a.n {
                    for j in 0..b.n {
                        out.h[i * MAX_VARS + j] += c * a.g[i] * b.g[j];
                    }
                }
            }
        }
        out
    }
}

macro_rules! scalar_ops {
    ($t:ident, $add:expr, $mul:expr) => {
        impl Add for $t {
            type Output = $t;
            fn add(self, o: $t) -> $t {
                $add(&self, &o, 1.0)
            }
        }
        impl Sub for $t {
            type Output = $t;
            fn sub(self, o: $t) -> $t {
                $add(&self, &o, -1.0)
            }
        }
        impl Mul for $t {
            type Output = $t;
            fn mul(self, o: $t) -> $t {
                $mul(&self, &o)
            }
        }
        impl Div for $t {
            type Output = $t;
            #[allow(clippy::suspicious_arithmetic_impl)]
            fn div(self, o: $t) -> $t {
                $mul(&self, &o.recip())
            }
        }
        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                self * -1.0
            }
        }
        impl Add<f64> for $t {
            type Output = $t;
            fn add(mut self, o: f64) -> $t {
                self.v += o;
                self
            }
        }
        impl Sub<f64> for $t {
            type Output = $t;
            fn sub(mut self, o: f64) -> $t {
                self.v -= o;
                self
            }
        }
        impl Div<f64> for $t {
            type Output = $t;
            #[allow(clippy::suspicious_arithmetic_impl)]
            fn div(self, o: f64) -> $t {
                self * (1.0 / o)
            }
        }
    };
}

fn dual_add(a: &Dual, b: &Dual, sign: f64) -> Dual {
    let n = a.n.max(b.n);
    let mut out = Dual { n, v: a.v + sign * b.v, g: [0.0; MAX_VARS] };
    for i in 0..n {
        out.g[i] = a.g[i] + sign * b.g[i];
    }
    out
}

fn dual_mul(a: &Dual, b: &Dual) -> Dual {
    let n = a.n.max(b.n);
    let mut out = Dual { n, v: a.v * b.v, g: [0.0; MAX_VARS] };
    for i in 0..n {
        out.g[i] = a.g[i] * b.v + b.g[i] * a.v;
    }
    out
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(mut self, o: f64) -> Dual {
        self.v *= o;
        for i in 0..self.n {
            self.g[i] *= o;
        }
        self
    }
}

fn hyper_add(a: &HyperDual, b: &HyperDual, sign: f64) -> HyperDual {
    let n = a.n.max(b.n);
    let mut out = HyperDual { n, v: a.v + sign * b.v, g: [0.0; MAX_VARS], h: [0.0; MAX_VARS * MAX_VARS] };
    for i in 0..n {
        out.g[i] = a.g[i] + sign * b.g[i];
        for j in 0..n {
            let k = i * MAX_VARS + j;
            out.h[k] = a.h[k] + sign * b.h[k];
        }
    }
    out
}

fn hyper_mul(a: &HyperDual, b: &HyperDual) -> HyperDual {
    let n = a.n.max(b.n);
    let mut out = HyperDual { n, v: a.v * b.v, g: [0.0; MAX_VARS], h: [0.0; MAX_VARS * MAX_VARS] };
    for i in 0..n {
        out.g[i] = a.g[i] * b.v + b.g[i] * a.v;
        for j in 0..n {
            let k = i * MAX_VARS + j;
            out.h[k] = a.h[k] * b.v + b.h[k] * a.v + a.g[i] * b.g[j] + b.g[i] * a.g[j];
        }
    }
    out
}

impl Mul<f64> for HyperDual {
    type Output = HyperDual;
    fn mul(mut self, o: f64) -> HyperDual {
        self.v *= o;
        for i in 0..self.n {
            self.g[i] *= o;
            for j in 0..self.n {
                self.h[i * MAX_VARS + j] *= o;
            }
        }
        self
    }
}

scalar_ops!(Dual, dual_add, dual_mul);
scalar_ops!(HyperDual, hyper_add, hyper_mul);

/// A scalar function of several variables, evaluable over any [`Scalar`].
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

pub fn gradient<F: ScalarFn>(f: &F, x: &[f64]) -> (f64, Vec<f64>) {
    let y = f.eval(&Dual::vars(x));
    (y.v, y.grad(x.len()))
}

pub fn hessian<F: ScalarFn>(f: &F, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let y = f.eval(&HyperDual::vars(x));
    (y.v, y.grad(x.len()), y.hess(x.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Poly;
    impl ScalarFn for Poly {
        fn eval<S: Scalar>(&self, x: &[S]) -> S {
            // x0^2 x1 + sin(x1) / x0 + sqrt(x0 x1) + atan2(x1, x0)
            let a = x[0].clone() * x[0].clone() * x[1].clone();
            let b = x[1].sin() / x[0].clone();
            let c = (x[0].clone() * x[1].clone()).sqrt();
            a + b + c + S::atan2(&x[1], &x[0])
        }
    }

    fn poly(x: &[f64]) -> f64 {
        x[0] * x[0] * x[1] + x[1].sin() / x[0] + (x[0] * x[1]).sqrt() + x[1].atan2(x[0])
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = [1.3, 0.7];
        let (v, g) = gradient(&Poly, &x);
        assert!((v - poly(&x)).abs() < 1e-15);
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (poly(&xp) - poly(&xm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_gradient_differences() {
        let x = [1.3, 0.7];
        let (_, _, h) = hessian(&Poly, &x);
        assert!((h[1] - h[2]).abs() < 1e-13);
        for i in 0..2 {
            let eps = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let gp = gradient(&Poly, &xp).1;
            let gm = gradient(&Poly, &xm).1;
            for j in 0..2 {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((h[j * 2 + i] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constants_mix_with_variables() {
        let x = HyperDual::var(2.0, 0, 1);
        let y = HyperDual::cst(3.0) * x * x + 1.0;
        assert_eq!(y.v, 13.0);
        assert_eq!(y.g[0], 12.0);
        assert_eq!(y.h[0], 6.0);
    }
}
