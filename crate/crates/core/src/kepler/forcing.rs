//! Time-periodic forcing potentials `U(q, t)` with period 1 in `t`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{Dual, Scalar};
use crate::rtbp::RtbpForcing;

/// `c(t) = constant + cos * cos(2 pi k t) + sin * sin(2 pi k t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigCoefficient {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
    #[serde(default = "one")]
    pub harmonic: u32,
}

fn one() -> u32 {
    1
}

impl TrigCoefficient {
    pub fn constant(c: f64) -> Self {
        TrigCoefficient { constant: c, cos: 0.0, sin: 0.0, harmonic: 1 }
    }

    fn eval<S: Scalar>(&self, t: &S) -> S {
        let mut out = S::cst(self.constant);
        if self.cos != 0.0 || self.sin != 0.0 {
            let arg = t.clone() * (TAU * self.harmonic as f64);
            if self.cos != 0.0 {
                out = out + arg.cos() * self.cos;
            }
            if self.sin != 0.0 {
                out = out + arg.sin() * self.sin;
            }
        }
        out
    }
}

/// A term `c(t) * prod_i q_i^{powers_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub powers: Vec<u32>,
    pub coefficient: TrigCoefficient,
}

type ValueFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;

/// User-supplied forcing. Missing derivatives are taken by central differences.
#[derive(Clone)]
pub struct CallbackForcing {
    pub value: Arc<ValueFn>,
    pub grad_q: Option<Arc<GradFn>>,
    pub dt: Option<Arc<ValueFn>>,
}

impl fmt::Debug for CallbackForcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CallbackForcing")
    }
}

#[derive(Clone, Debug)]
pub enum ForcingKind {
    Zero,
    /// `U = <c(t), q>` with one trigonometric coefficient per coordinate.
    Linear(Vec<TrigCoefficient>),
    Polynomial(Vec<Monomial>),
    Rtbp(Arc<RtbpForcing>),
    Callback(CallbackForcing),
}

/// Perturbation `epsilon * U(q, t)` restricted to the ball `|q| < rho`.
#[derive(Clone, Debug)]
pub struct ForcingSpec {
    pub dim: usize,
    pub epsilon: f64,
    pub rho: f64,
    pub kind: ForcingKind,
    /// Subtract `U(0, t)` so that the potential vanishes at the origin.
    pub normalized: bool,
}

impl ForcingSpec {
    pub fn zero(dim: usize) -> Self {
        ForcingSpec { dim, epsilon: 0.0, rho: f64::INFINITY, kind: ForcingKind::Zero, normalized: false }
    }

    pub fn new(dim: usize, epsilon: f64, kind: ForcingKind) -> Self {
        ForcingSpec { dim, epsilon, rho: f64::INFINITY, kind, normalized: false }
    }

    /// `U = eps0 (q1 cos 2 pi t + q2 sin 2 pi t)`, a uniform field rotating once per period.
    pub fn rotating_linear(dim: usize, epsilon: f64, eps0: f64) -> Self {
        assert!(dim >= 2);
        let mut coeffs = vec![TrigCoefficient::constant(0.0); dim];
        coeffs[0] = TrigCoefficient { constant: 0.0, cos: eps0, sin: 0.0, harmonic: 1 };
        coeffs[1] = TrigCoefficient { constant: 0.0, cos: 0.0, sin: eps0, harmonic: 1 };
        Self::new(dim, epsilon, ForcingKind::Linear(coeffs))
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        ForcingSpec { epsilon, ..self.clone() }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.epsilon == 0.0 || matches!(self.kind, ForcingKind::Zero)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidInput(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        match &self.kind {
            ForcingKind::Linear(c) if c.len() != self.dim => {
                Err(Error::InvalidInput(format!("linear forcing has {} coefficients for d = {}", c.len(), self.dim)))
            }
            ForcingKind::Polynomial(terms) if terms.iter().any(|m| m.powers.len() != self.dim) => {
                Err(Error::InvalidInput("monomial exponent count differs from dimension".into()))
            }
            ForcingKind::Rtbp(r) if r.dim() != self.dim => {
                Err(Error::InvalidInput("RTBP forcing dimension mismatch".into()))
            }
            _ => Ok(()),
        }
    }

    /// Fails when `q` lies outside the forcing domain.
    pub fn check_domain(&self, q: &[f64]) -> Result<()> {
        if self.rho.is_finite() {
            let r = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r >= self.rho {
                return Err(Error::OutsideDomain { norm: r, rho: self.rho });
            }
        }
        Ok(())
    }

    fn raw<S: Scalar>(&self, q: &[S], t: &S) -> S {
        let d = self.dim;
        match &self.kind {
            ForcingKind::Zero => S::cst(0.0),
            ForcingKind::Linear(c) => c
                .iter()
                .zip(q.iter().take(d))
                .fold(S::cst(0.0), |acc, (ci, qi)| acc + ci.eval(t) * qi.clone()),
            ForcingKind::Polynomial(terms) => terms.iter().fold(S::cst(0.0), |acc, m| {
                let mut term = m.coefficient.eval(t);
                for (qi, &k) in q.iter().zip(&m.powers) {
                    if k > 0 {
                        term = term * qi.powi(k as i32);
                    }
                }
                acc + term
            }),
            ForcingKind::Rtbp(r) => r.potential(&q[..d], t),
            ForcingKind::Callback(cb) => callback_eval(cb, &q[..d], t),
        }
    }

    /// The potential `U(q, t)` without the `epsilon` factor.
    pub fn potential<S: Scalar>(&self, q: &[S], t: &S) -> S {
        let u = self.raw(q, t);
        if self.normalized {
            let zero = vec![S::cst(0.0); self.dim];
            u - self.raw(&zero, t)
        } else {
            u
        }
    }

    pub fn value(&self, q: &[f64], t: f64) -> f64 {
        self.potential(q, &t)
    }

    fn jet1(&self, q: &[f64], t: f64) -> Dual {
        let d = self.dim;
        let vars: Vec<Dual> = (0..d).map(|i| Dual::var(q[i], i, d + 1)).collect();
        self.potential(&vars, &Dual::var(t, d, d + 1))
    }

    pub fn grad_q(&self, q: &[f64], t: f64) -> Vec<f64> {
        self.jet1(q, t).g[..self.dim].to_vec()
    }

    pub fn dt(&self, q: &[f64], t: f64) -> f64 {
        self.jet1(q, t).g[self.dim]
    }
}

/// Normalized copy with `U(0, t) = 0` for all `t`.
pub fn normalize_forcing(f: &ForcingSpec) -> ForcingSpec {
    ForcingSpec { normalized: true, ..f.clone() }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn callback_gradient(cb: &CallbackForcing, q: &[f64], t: f64) -> Vec<f64> {
    let d = q.len();
    let mut g = match &cb.grad_q {
        Some(f) => f(q, t),
        None => {
            let mut g = vec![0.0; d];
            let mut x = q.to_vec();
            for i in 0..d {
                let h = fd_step(q[i]);
                x[i] = q[i] + h;
                let fp = (cb.value)(&x, t);
                x[i] = q[i] - h;
                let fm = (cb.value)(&x, t);
                x[i] = q[i];
                g[i] = (fp - fm) / (2.0 * h);
            }
            g
        }
    };
    let dt = match &cb.dt {
        Some(f) => f(q, t),
        None => {
            let h = fd_step(t);
            ((cb.value)(q, t + h) - (cb.value)(q, t - h)) / (2.0 * h)
        }
    };
    g.push(dt);
    g
}

fn callback_eval<S: Scalar>(cb: &CallbackForcing, q: &[S], t: &S) -> S {
    let qv: Vec<f64> = q.iter().map(Scalar::value).collect();
    let tv = t.value();
    let v = (cb.value)(&qv, tv);
    if S::ORDER == 0 {
        return S::cst(v);
    }
    let m = q.len() + 1;
    let grad = callback_gradient(cb, &qv, tv);
    let mut hess = vec![0.0; m * m];
    let mut x = qv.clone();
    x.push(tv);
    for j in 0..m {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let gp = callback_gradient(cb, &xp[..m - 1], xp[m - 1]);
        let gm = callback_gradient(cb, &xm[..m - 1], xm[m - 1]);
        for i in 0..m {
            hess[i * m + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    for i in 0..m {
        for j in 0..i {
            let avg = 0.5 * (hess[i * m + j] + hess[j * m + i]);
            hess[i * m + j] = avg;
            hess[j * m + i] = avg;
        }
    }
    let mut args: Vec<S> = q.to_vec();
    args.push(t.clone());
    S::compose(&args, v, &grad, &hess)
}
