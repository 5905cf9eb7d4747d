//! Hamiltonian flows on canonical coordinates `x = (Q, P)`.
//!
//! A regularized system only supplies its Hamiltonian over [`Scalar`]; the
//! vector field `J grad H`, the variational equations and the Liouville-form
//! quadrature are derived here.

use crate::error::{Error, Result};
use crate::integrator::OdeSystem;
use crate::jet::{Dual, HyperDual, Scalar};

pub trait CanonicalSystem: Sync {
    /// Degrees of freedom; the state has `2 * dof()` components.
    fn dof(&self) -> usize;

    fn hamiltonian<S: Scalar>(&self, x: &[S]) -> S;

    /// Rejects states outside the region where the Hamiltonian is defined.
    fn admissible(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Index within `Q` of the time-like coordinate conjugate to `tau`.
    fn time_slot(&self) -> usize {
        self.dof() - 1
    }

    /// Physical position as a smooth function of the state.
    fn physical_q<S: Scalar>(&self, x: &[S]) -> Vec<S>;

    /// Physical time as a smooth function of the state.
    fn physical_t<S: Scalar>(&self, x: &[S]) -> S;

    /// Physical momentum; may be singular at collisions.
    fn physical_p(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Restores constraints after a numerical step (no-op for flat charts).
    fn project(&self, _x: &mut [f64]) {}

    /// Constraint values that must vanish along the flow.
    fn constraints(&self, _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}

pub fn energy<C: CanonicalSystem>(sys: &C, x: &[f64]) -> f64 {
    sys.hamiltonian(x)
}

pub fn gradient<C: CanonicalSystem>(sys: &C, x: &[f64]) -> (f64, Vec<f64>) {
    let h = sys.hamiltonian(&Dual::vars(x));
    (h.v, h.grad(x.len()))
}

pub fn hessian<C: CanonicalSystem>(sys: &C, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = sys.hamiltonian(&HyperDual::vars(x));
    (h.grad(x.len()), h.hess(x.len()))
}

/// `J grad` of a gradient: `(dH/dP, -dH/dQ)`.
pub fn symplectic_gradient(grad: &[f64], out: &mut [f64]) {
    let n = grad.len() / 2;
    for i in 0..n {
        out[i] = grad[n + i];
        out[n + i] = -grad[i];
    }
}

pub fn vector_field<C: CanonicalSystem>(sys: &C, x: &[f64]) -> Result<Vec<f64>> {
    sys.admissible(x)?;
    let (_, g) = gradient(sys, x);
    let mut out = vec![0.0; x.len()];
    symplectic_gradient(&g, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("non-finite vector field".into()));
    }
    Ok(out)
}

/// Canonical matrix `[[0, I], [-I, 0]]` of size `2n`.
pub fn omega(n: usize) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        m[(i, n + i)] = 1.0;
        m[(n + i, i)] = -1.0;
    }
    m
}

/// The flow, optionally carrying `A = int P . dQ` as a trailing component.
pub struct HamiltonianFlow<'a, C: CanonicalSystem> {
    pub sys: &'a C,
    pub with_action: bool,
}

impl<'a, C: CanonicalSystem> HamiltonianFlow<'a, C> {
    pub fn new(sys: &'a C, with_action: bool) -> Self {
        HamiltonianFlow { sys, with_action }
    }
}

impl<C: CanonicalSystem> OdeSystem for HamiltonianFlow<'_, C> {
    fn dim(&self) -> usize {
        2 * self.sys.dof() + usize::from(self.with_action)
    }

    fn rhs(&self, _s: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let m = 2 * self.sys.dof();
        let f = vector_field(self.sys, &y[..m])?;
        dy[..m].copy_from_slice(&f);
        if self.with_action {
            let n = m / 2;
            dy[m] = (0..n).map(|i| y[n + i] * f[i]).sum();
        }
        Ok(())
    }
}

/// State plus the fundamental matrix `Phi` (row-major), `Phi' = J Hess(H) Phi`.
pub struct VariationalFlow<'a, C: CanonicalSystem> {
    pub sys: &'a C,
}

impl<C: CanonicalSystem> OdeSystem for VariationalFlow<'_, C> {
    fn dim(&self) -> usize {
        let m = 2 * self.sys.dof();
        m + m * m
    }

    fn rhs(&self, _s: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let m = 2 * self.sys.dof();
        let n = m / 2;
        let x = &y[..m];
        self.sys.admissible(x)?;
        let (g, h) = hessian(self.sys, x);
        symplectic_gradient(&g, &mut dy[..m]);
        // J Hess: rows 0..n are Hess rows n..2n, rows n..2n are minus Hess rows 0..n.
        let phi = &y[m..];
        let out = &mut dy[m..];
        for i in 0..m {
            let (src, sign) = if i < n { (n + i, 1.0) } else { (i - n, -1.0) };
            let hrow = &h[src * m..(src + 1) * m];
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += hrow[k] * phi[k * m + j];
                }
                out[i * m + j] = sign * acc;
            }
        }
        if dy.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration("non-finite variational field".into()));
        }
        Ok(())
    }
}

/// Initial condition for [`VariationalFlow`]: state followed by the identity.
pub fn variational_initial(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut y = x.to_vec();
    y.resize(m + m * m, 0.0);
    for i in 0..m {
        y[m + i * m + i] = 1.0;
    }
    y
}

/// Symplecticity defect `max |M^T Omega M - Omega|`.
pub fn symplectic_defect(m: &nalgebra::DMatrix<f64>) -> f64 {
    let n = m.nrows() / 2;
    let om = omega(n);
    (m.transpose() * &om * m - om).abs().max()
}

/// Physical velocity `dq/dt` and acceleration `d^2q/dt^2` along the flow,
/// obtained by differentiating the regularized vector field.
pub fn physical_velocity_acceleration<C: CanonicalSystem>(sys: &C, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = x.len();
    let (g, h) = hessian(sys, x);
    let mut xdot = vec![0.0; m];
    symplectic_gradient(&g, &mut xdot);
    // Second derivative of the state: x'' = J Hess(H) x'.
    let n = m / 2;
    let mut xddot = vec![0.0; m];
    for i in 0..m {
        let (src, sign) = if i < n { (n + i, 1.0) } else { (i - n, -1.0) };
        xddot[i] = sign * (0..m).map(|k| h[src * m + k] * xdot[k]).sum::<f64>();
    }
    let vars = HyperDual::vars(x);
    let qj = sys.physical_q(&vars);
    let tj = sys.physical_t(&vars);
    let d1 = |j: &HyperDual| -> f64 { (0..m).map(|k| j.g[k] * xdot[k]).sum() };
    let d2 = |j: &HyperDual| -> f64 {
        let mut acc: f64 = (0..m).map(|k| j.g[k] * xddot[k]).sum();
        for a in 0..m {
            for b in 0..m {
                acc += j.h[a * crate::jet::MAX_VARS + b] * xdot[a] * xdot[b];
            }
        }
        acc
    };
    let t1 = d1(&tj);
    let t2 = d2(&tj);
    if t1.abs() < 1e-300 {
        return Err(Error::CollisionPoint);
    }
    let mut vel = Vec::with_capacity(qj.len());
    let mut acc = Vec::with_capacity(qj.len());
    for qc in &qj {
        let q1 = d1(qc);
        let q2 = d2(qc);
        vel.push(q1 / t1);
        acc.push((q2 - q1 * t2 / t1) / (t1 * t1));
    }
    Ok((vel, acc))
}

/// A sample of a trajectory expressed in physical variables.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryPoint {
    pub s: f64,
    pub t: f64,
    pub tau: f64,
    pub q: Vec<f64>,
    /// `NaN` at a collision, where the momentum is unbounded.
    pub p: Vec<f64>,
    pub energy: f64,
}

/// Physical reading of a regularized state; `energy` is the regularized Hamiltonian.
pub fn physical_point<C: CanonicalSystem>(sys: &C, s: f64, x: &[f64]) -> TrajectoryPoint {
    let q = sys.physical_q(x);
    let p = sys.physical_p(x).unwrap_or_else(|_| vec![f64::NAN; q.len()]);
    TrajectoryPoint { s, t: sys.physical_t(x), tau: x[sys.dof() + sys.time_slot()], q, p, energy: sys.hamiltonian(x) }
}
