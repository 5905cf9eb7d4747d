//! Levi-Civita regularization of the planar forced Kepler problem.
//!
//! `q = z^2`, `p = w / (2 conj z)`; the regularized Hamiltonian
//! `|w|^2/8 + tau |z|^2 + eps |z|^2 U(z^2, t) - 1` is smooth through `z = 0`.
//! State layout: `[z1, z2, t, w1, w2, tau]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{vector_field, CanonicalSystem, HamiltonianFlow};
use crate::integrator::{integrate, locate_root, StepAction, Tolerances};
use crate::jet::Scalar;
use crate::kepler::{CartesianExtState, ForcingSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcState {
    pub z: [f64; 2],
    pub w: [f64; 2],
    pub t: f64,
    pub tau: f64,
}

impl LcState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.z[0], self.z[1], self.t, self.w[0], self.w[1], self.tau]
    }

    pub fn from_slice(y: &[f64]) -> Self {
        LcState { z: [y[0], y[1]], w: [y[3], y[4]], t: y[2], tau: y[5] }
    }

    /// The other preimage of the same physical state.
    pub fn flipped(&self) -> Self {
        LcState { z: [-self.z[0], -self.z[1]], w: [-self.w[0], -self.w[1]], ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Plus,
    Minus,
}

/// `(z, w) -> (q, p)`.
pub fn lc_map(z: [f64; 2], w: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
    let r2 = z[0] * z[0] + z[1] * z[1];
    if r2 == 0.0 {
        return Err(Error::CollisionPoint);
    }
    let q = [z[0] * z[0] - z[1] * z[1], 2.0 * z[0] * z[1]];
    let p = [(w[0] * z[0] - w[1] * z[1]) / (2.0 * r2), (w[0] * z[1] + w[1] * z[0]) / (2.0 * r2)];
    Ok((q, p))
}

/// Principal (`Plus`) or negated square root preimage of `(q, p)`.
pub fn lc_inverse(q: [f64; 2], p: [f64; 2], branch: Branch) -> Result<([f64; 2], [f64; 2])> {
    if q[0] == 0.0 && q[1] == 0.0 {
        return Err(Error::CollisionPoint);
    }
    let root = num_complex::Complex64::new(q[0], q[1]).sqrt();
    let sign = if branch == Branch::Plus { 1.0 } else { -1.0 };
    let z = [sign * root.re, sign * root.im];
    let w = [2.0 * (z[0] * p[0] + z[1] * p[1]), 2.0 * (z[0] * p[1] - z[1] * p[0])];
    Ok((z, w))
}

pub fn lc_from_physical(x: &CartesianExtState, branch: Branch) -> Result<LcState> {
    if x.dim() != 2 {
        return Err(Error::InvalidInput("Levi-Civita chart needs d = 2".into()));
    }
    let (z, w) = lc_inverse([x.q[0], x.q[1]], [x.p[0], x.p[1]], branch)?;
    Ok(LcState { z, w, t: x.t, tau: x.tau })
}

pub fn physical_from_lc(s: &LcState) -> Result<CartesianExtState> {
    let (q, p) = lc_map(s.z, s.w)?;
    Ok(CartesianExtState { q: q.to_vec(), p: p.to_vec(), t: s.t, tau: s.tau })
}

/// The Levi-Civita regularized system for a planar (or linear) forcing.
#[derive(Clone, Debug)]
pub struct LcSystem {
    pub forcing: ForcingSpec,
}

impl LcSystem {
    pub fn new(forcing: &ForcingSpec) -> Result<Self> {
        if forcing.dim > 2 {
            return Err(Error::InvalidInput("Levi-Civita chart supports d <= 2".into()));
        }
        Ok(LcSystem { forcing: forcing.clone() })
    }
}

fn square<S: Scalar>(z1: &S, z2: &S) -> [S; 2] {
    [z1.clone() * z1.clone() - z2.clone() * z2.clone(), z1.clone() * z2.clone() * 2.0]
}

impl CanonicalSystem for LcSystem {
    fn dof(&self) -> usize {
        3
    }

    fn hamiltonian<S: Scalar>(&self, x: &[S]) -> S {
        let (z1, z2, t, w1, w2, tau) = (&x[0], &x[1], &x[2], &x[3], &x[4], &x[5]);
        let r2 = z1.clone() * z1.clone() + z2.clone() * z2.clone();
        let kin = (w1.clone() * w1.clone() + w2.clone() * w2.clone()) * 0.125;
        let mut h = kin + tau.clone() * r2.clone() - 1.0;
        if !self.forcing.is_zero() {
            let q = square(z1, z2);
            let u = self.forcing.potential(&q, t);
            h = h + r2 * u * self.forcing.epsilon;
        }
        h
    }

    fn admissible(&self, x: &[f64]) -> Result<()> {
        let r2 = x[0] * x[0] + x[1] * x[1];
        if self.forcing.rho.is_finite() && r2 >= self.forcing.rho {
            return Err(Error::OutsideDomain { norm: r2, rho: self.forcing.rho });
        }
        Ok(())
    }

    fn physical_q<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        square(&x[0], &x[1]).to_vec()
    }

    fn physical_t<S: Scalar>(&self, x: &[S]) -> S {
        x[2].clone()
    }

    fn physical_p(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(lc_map([x[0], x[1]], [x[3], x[4]])?.1.to_vec())
    }
}

pub fn lc_hamiltonian(s: &LcState, f: &ForcingSpec) -> Result<f64> {
    Ok(LcSystem::new(f)?.hamiltonian(&s.to_vec()))
}

pub fn lc_vector_field(s: &LcState, f: &ForcingSpec) -> Result<LcState> {
    let sys = LcSystem::new(f)?;
    Ok(LcState::from_slice(&vector_field(&sys, &s.to_vec())?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LcStop {
    /// Stop at fictitious time `s`.
    Fictitious(f64),
    /// Stop once physical time has advanced by the given amount.
    TimeAdvance(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LcSample {
    pub s: f64,
    pub state: LcState,
    /// Accumulated `int w . dz + tau dt` from the start.
    pub action: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionCrossing {
    pub s: f64,
    pub state: LcState,
    pub z_prime: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LcTrajectory {
    pub samples: Vec<LcSample>,
    pub crossings: Vec<CollisionCrossing>,
}

impl LcTrajectory {
    pub fn last(&self) -> &LcSample {
        self.samples.last().expect("trajectory has samples")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LcOptions {
    pub tol: Tolerances,
    /// Record dense samples at this fictitious-time spacing (in addition to step ends).
    pub stride: Option<f64>,
    /// Closest approaches with `|z|` below this count as collision crossings.
    pub crossing_radius: f64,
    /// Hard bound on fictitious time when stopping by physical time.
    pub max_s: f64,
}

impl Default for LcOptions {
    fn default() -> Self {
        LcOptions { tol: Tolerances::default(), stride: None, crossing_radius: 1e-7, max_s: 1e7 }
    }
}

/// Integrates the regularized flow, recording samples and collision crossings.
pub fn integrate_lc(x0: &LcState, f: &ForcingSpec, stop: LcStop, opts: &LcOptions) -> Result<LcTrajectory> {
    let sys = LcSystem::new(f)?;
    let flow = HamiltonianFlow::new(&sys, true);
    let mut y0 = x0.to_vec();
    y0.push(0.0);
    let (s_end, t_target) = match stop {
        LcStop::Fictitious(s) => (s, None),
        LcStop::TimeAdvance(dt) => (opts.max_s, Some(x0.t + dt)),
    };
    let mut samples = vec![LcSample { s: 0.0, state: *x0, action: 0.0 }];
    let mut crossings = Vec::new();
    let mut next_sample = 1usize;
    let mut reached = false;
    let push = |samples: &mut Vec<LcSample>, s: f64, y: &[f64]| {
        samples.push(LcSample { s, state: LcState::from_slice(y), action: y[6] });
    };
    let out = integrate(&flow, 0.0, &y0, s_end, &opts.tol, |st| {
        let mut stop_at = st.s1();
        let mut stopping = false;
        if let Some(tt) = t_target {
            if st.y1[2] >= tt {
                if let Some((s, _)) = locate_root(st, |_, y| y[2] - tt, 1e-14 * st.s1().abs().max(1.0))? {
                    stop_at = s;
                    stopping = true;
                }
            }
        }
        // Closest approach to the origin: z . z' = z . w / 4 changes sign from - to +.
        let g = |_: f64, y: &[f64]| y[0] * y[3] + y[1] * y[4];
        if g(st.s0, st.y0) < 0.0 && g(st.s1(), st.y1) >= 0.0 {
            if let Some((s, y)) = locate_root(st, g, 1e-13 * st.s1().abs().max(1.0))? {
                let rz = (y[0] * y[0] + y[1] * y[1]).sqrt();
                if s <= stop_at && rz < opts.crossing_radius {
                    let zp = [y[3] / 4.0, y[4] / 4.0];
                    if (zp[0] * zp[0] + zp[1] * zp[1]).sqrt() < 1e-10 {
                        return Err(Error::TangentialCrossing);
                    }
                    crossings.push(CollisionCrossing { s, state: LcState::from_slice(&y), z_prime: zp });
                }
            }
        }
        if let Some(h) = opts.stride {
            loop {
                let sk = next_sample as f64 * h;
                if sk > stop_at {
                    break;
                }
                let y = st.eval(sk)?;
                push(&mut samples, sk, &y);
                next_sample += 1;
            }
        }
        if stopping {
            reached = true;
            let y = st.eval(stop_at)?;
            push(&mut samples, stop_at, &y);
            return Ok(StepAction::Stop(stop_at));
        }
        if opts.stride.is_none() {
            push(&mut samples, st.s1(), st.y1);
        }
        Ok(StepAction::Continue)
    })?;
    if t_target.is_some() && !reached {
        return Err(Error::Integration("physical time target not reached within max_s".into()));
    }
    if samples.last().is_none_or(|x| x.s < out.s) {
        push(&mut samples, out.s, &out.y);
    }
    Ok(LcTrajectory { samples, crossings })
}

/// `int (w . dz + tau dt)` over the whole trajectory.
pub fn lc_action(traj: &LcTrajectory) -> f64 {
    traj.last().action - traj.samples[0].action
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CollisionLimits {
    /// Unit physical direction along which the collision is approached and left.
    pub direction: [f64; 2],
    /// `-tau` at the collision time.
    pub energy_limit: f64,
    /// Limit of `|p|^2/2 - 1/|q|` extrapolated from the incoming arc.
    pub extrapolated_energy: f64,
}

/// Collision direction and energy limit at a recorded crossing.
pub fn collision_limits(crossing: &CollisionCrossing, f: &ForcingSpec, tol: &Tolerances) -> Result<CollisionLimits> {
    let zp = crossing.z_prime;
    let n = (zp[0] * zp[0] + zp[1] * zp[1]).sqrt();
    if n < 1e-10 {
        return Err(Error::TangentialCrossing);
    }
    let u = [zp[0] / n, zp[1] / n];
    let direction = [u[0] * u[0] - u[1] * u[1], 2.0 * u[0] * u[1]];
    let sys = LcSystem::new(f)?;
    let flow = HamiltonianFlow::new(&sys, false);
    let y0 = crossing.state.to_vec();
    // Sample the incoming arc backward from the crossing.
    let hs: Vec<f64> = (0..5).map(|k| 0.16 * 0.5f64.powi(k)).collect();
    let mut vals = Vec::with_capacity(hs.len());
    for &h in &hs {
        let out = integrate(&flow, 0.0, &y0, -h, tol, |_| Ok(StepAction::Continue))?;
        let st = LcState::from_slice(&out.y);
        let x = physical_from_lc(&st)?;
        let r = (x.q[0] * x.q[0] + x.q[1] * x.q[1]).sqrt();
        vals.push(0.5 * (x.p[0] * x.p[0] + x.p[1] * x.p[1]) - 1.0 / r);
    }
    let extrapolated_energy = neville_at_zero(&hs, &vals);
    Ok(CollisionLimits { direction, energy_limit: -crossing.state.tau, extrapolated_energy })
}

/// Polynomial extrapolation of `(x_i, y_i)` to `x = 0`.
pub fn neville_at_zero(x: &[f64], y: &[f64]) -> f64 {
    let mut p = y.to_vec();
    let n = x.len();
    for k in 1..n {
        for i in 0..n - k {
            p[i] = (x[i + k] * p[i] - x[i] * p[i + 1]) / (x[i + k] - x[i]);
        }
    }
    p[0]
}
