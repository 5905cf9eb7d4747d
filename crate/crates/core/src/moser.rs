//! Moser regularization: the Kepler flow as a geodesic flow on `T*S^d`.
//!
//! Stereographic coordinates use `x = -p`, `y = q`. Two pictures are provided:
//! the sphere of radius `r = sqrt(2 tau)` carrying the physical time, and the
//! rescaled unit sphere with canonical coordinates `(u~, t~; v~, tau)`.
//! On the unit sphere the physical time is `t = t~ + v~_{d+1} / (2 tau)`;
//! the shift makes the rescaling symplectic when `tau` varies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{vector_field, CanonicalSystem, HamiltonianFlow};
use crate::integrator::{integrate, locate_root, StepAction, Tolerances};
use crate::jet::{dot, norm_sq, Scalar};
use crate::kepler::{CartesianExtState, ForcingSpec};

/// Drift beyond which a trajectory is declared broken rather than re-projected.
pub const MAX_CONSTRAINT_DRIFT: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stereographic projection from the north pole of the sphere of radius `r`.
pub fn stereo_project(u: &[f64], v: &[f64], r: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = u.len() - 1;
    let c = r - u[d];
    if c.abs() <= 1e-15 * r {
        return Err(Error::NorthPole);
    }
    let x = (0..d).map(|i| r * u[i] / c).collect();
    let y = (0..d).map(|i| c / r * v[i] + u[i] * v[d] / r).collect();
    Ok((x, y))
}

/// Inverse stereographic projection onto `T*S^d_r`.
pub fn stereo_inverse(x: &[f64], y: &[f64], r: f64) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let x2 = fdot(x, x);
    let xy = fdot(x, y);
    let r2 = r * r;
    let den = x2 + r2;
    let mut u: Vec<f64> = x.iter().map(|xi| 2.0 * r2 * xi / den).collect();
    u.push(r * (x2 - r2) / den);
    let mut v: Vec<f64> = (0..d).map(|i| den / (2.0 * r2) * y[i] - xy / r2 * x[i]).collect();
    v.push(xy / r);
    (u, v)
}

/// Radius picture: `(u, v)` on `T*S^d` of radius `sqrt(2 tau)`, physical time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoserState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
    pub tau: f64,
}

/// Unit-sphere picture with canonical time `t~`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitMoserState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
    pub tau: f64,
}

impl UnitMoserState {
    pub fn dim(&self) -> usize {
        self.u.len() - 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = self.u.clone();
        y.push(self.t);
        y.extend_from_slice(&self.v);
        y.push(self.tau);
        y
    }

    pub fn from_slice(y: &[f64]) -> Self {
        let m = y.len() / 2;
        UnitMoserState { u: y[..m - 1].to_vec(), t: y[m - 1], v: y[m..2 * m - 1].to_vec(), tau: y[2 * m - 1] }
    }

    pub fn physical_time(&self) -> f64 {
        self.t + self.v[self.dim()] / (2.0 * self.tau)
    }

    /// `(|u|^2 - 1, u . v)`.
    pub fn constraint_drift(&self) -> f64 {
        (fdot(&self.u, &self.u) - 1.0).abs().max(fdot(&self.u, &self.v).abs())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveTau(tau))
    }
}

pub fn moser_from_physical(x: &CartesianExtState) -> Result<MoserState> {
    check_tau(x.tau)?;
    let r = (2.0 * x.tau).sqrt();
    let xs: Vec<f64> = x.p.iter().map(|v| -v).collect();
    let (u, v) = stereo_inverse(&xs, &x.q, r);
    Ok(MoserState { u, v, t: x.t, tau: x.tau })
}

pub fn physical_from_moser(m: &MoserState) -> Result<CartesianExtState> {
    check_tau(m.tau)?;
    let r = (2.0 * m.tau).sqrt();
    let (x, y) = stereo_project(&m.u, &m.v, r)?;
    Ok(CartesianExtState { q: y, p: x.iter().map(|v| -v).collect(), t: m.t, tau: m.tau })
}

/// `2 tau |v| - 1 + eps |q| U(q, t)` in the radius picture.
pub fn moser_hamiltonian(m: &MoserState, f: &ForcingSpec) -> Result<f64> {
    check_tau(m.tau)?;
    let r = (2.0 * m.tau).sqrt();
    let d = m.u.len() - 1;
    let vn = norm(&m.v);
    let mut h = 2.0 * m.tau * vn - 1.0;
    if !f.is_zero() {
        let qn = vn * (r - m.u[d]) / r;
        let q: Vec<f64> = (0..d).map(|i| (r - m.u[d]) / r * m.v[i] + m.u[i] * m.v[d] / r).collect();
        h += f.epsilon * qn * f.value(&q, m.t);
    }
    Ok(h)
}

/// Radius picture to unit sphere: `u~ = u / r`, `v~ = r v`, `t~ = t - v~_{d+1} / (2 tau)`.
pub fn rescale_to_unit_sphere(m: &MoserState) -> Result<UnitMoserState> {
    check_tau(m.tau)?;
    let r = (2.0 * m.tau).sqrt();
    let d = m.u.len() - 1;
    let u: Vec<f64> = m.u.iter().map(|x| x / r).collect();
    let v: Vec<f64> = m.v.iter().map(|x| x * r).collect();
    let t = m.t - v[d] / (2.0 * m.tau);
    Ok(UnitMoserState { u, v, t, tau: m.tau })
}

pub fn unit_to_radius(s: &UnitMoserState) -> Result<MoserState> {
    check_tau(s.tau)?;
    let r = (2.0 * s.tau).sqrt();
    Ok(MoserState {
        u: s.u.iter().map(|x| x * r).collect(),
        v: s.v.iter().map(|x| x / r).collect(),
        t: s.physical_time(),
        tau: s.tau,
    })
}

pub fn unit_from_physical(x: &CartesianExtState) -> Result<UnitMoserState> {
    rescale_to_unit_sphere(&moser_from_physical(x)?)
}

pub fn physical_from_unit(s: &UnitMoserState) -> Result<CartesianExtState> {
    physical_from_moser(&unit_to_radius(s)?)
}

/// Physical `|q|` from unit-sphere coordinates.
pub fn unit_q_norm(s: &UnitMoserState) -> f64 {
    let d = s.dim();
    norm(&s.v) * (1.0 - s.u[d]) / (2.0 * s.tau).sqrt()
}

/// Orthogonal re-projection onto `|u| = 1`, `u . v = 0`.
pub fn project_unit(u: &mut [f64], v: &mut [f64]) {
    let n = norm(u);
    for x in u.iter_mut() {
        *x /= n;
    }
    let uv = fdot(u, v);
    for (vi, ui) in v.iter_mut().zip(u.iter()) {
        *vi -= uv * ui;
    }
}

/// Rescaled Moser system on ambient coordinates `(u~, t~; v~, tau)` in
/// `R^{2(d+1)+2}`. The Hamiltonian is extended off `T*S^d` so that it is
/// invariant under the flows of `|u|^2/2` and `u . v`, which keeps both
/// constraints exactly conserved.
#[derive(Clone, Debug)]
pub struct MoserSystem {
    pub forcing: ForcingSpec,
    pub d: usize,
}

impl MoserSystem {
    pub fn new(forcing: &ForcingSpec) -> Self {
        MoserSystem { forcing: forcing.clone(), d: forcing.dim }
    }

    /// Projected `(u, v)` of the extension, plus the physical time.
    pub(crate) fn reduced<S: Scalar>(&self, x: &[S]) -> (Vec<S>, Vec<S>, S, S) {
        let m = self.d + 1;
        let u = &x[..m];
        let v = &x[m + 1..2 * m + 1];
        let t = x[m].clone();
        let tau = x[2 * m + 1].clone();
        let un2 = norm_sq(u);
        let un = un2.sqrt();
        let uv = dot(u, v);
        let uh: Vec<S> = u.iter().map(|c| c.clone() / un.clone()).collect();
        let vh: Vec<S> = (0..m)
            .map(|i| (v[i].clone() - u[i].clone() * uv.clone() / un2.clone()) * un.clone())
            .collect();
        let phys_t = t + vh[self.d].clone() / (tau.clone() * 2.0);
        (uh, vh, phys_t, tau)
    }

    pub(crate) fn q_of<S: Scalar>(&self, uh: &[S], vh: &[S], tau: &S) -> Vec<S> {
        let d = self.d;
        let r = (tau.clone() * 2.0).sqrt();
        let c = S::cst(1.0) - uh[d].clone();
        (0..d)
            .map(|i| (c.clone() * vh[i].clone() + uh[i].clone() * vh[d].clone()) / r.clone())
            .collect()
    }
}

impl CanonicalSystem for MoserSystem {
    fn dof(&self) -> usize {
        self.d + 2
    }

    fn hamiltonian<S: Scalar>(&self, x: &[S]) -> S {
        let (uh, vh, phys_t, tau) = self.reduced(x);
        let r = (tau.clone() * 2.0).sqrt();
        let vn = norm_sq(&vh).sqrt();
        let mut h = r.clone() * vn.clone() - 1.0;
        if !self.forcing.is_zero() {
            let qn = vn * (S::cst(1.0) - uh[self.d].clone()) / r;
            let q = self.q_of(&uh, &vh, &tau);
            h = h + qn * self.forcing.potential(&q, &phys_t) * self.forcing.epsilon;
        }
        h
    }

    fn admissible(&self, x: &[f64]) -> Result<()> {
        let m = self.d + 1;
        check_tau(x[2 * m + 1])?;
        if self.forcing.rho.is_finite() {
            let s = UnitMoserState::from_slice(x);
            let qn = unit_q_norm(&s);
            if qn >= self.forcing.rho {
                return Err(Error::OutsideDomain { norm: qn, rho: self.forcing.rho });
            }
        }
        Ok(())
    }

    fn time_slot(&self) -> usize {
        self.d + 1
    }

    fn physical_q<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let (uh, vh, _, tau) = self.reduced(x);
        self.q_of(&uh, &vh, &tau)
    }

    fn physical_t<S: Scalar>(&self, x: &[S]) -> S {
        self.reduced(x).2
    }

    fn physical_p(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(physical_from_unit(&UnitMoserState::from_slice(x))?.p)
    }

    fn project(&self, x: &mut [f64]) {
        let m = self.d + 1;
        let (a, b) = x.split_at_mut(m + 1);
        project_unit(&mut a[..m], &mut b[..m]);
    }

    fn constraints(&self, x: &[f64]) -> Vec<f64> {
        let m = self.d + 1;
        let u = &x[..m];
        let v = &x[m + 1..2 * m + 1];
        vec![fdot(u, u) - 1.0, fdot(u, v)]
    }
}

pub fn unit_hamiltonian(s: &UnitMoserState, f: &ForcingSpec) -> f64 {
    MoserSystem::new(f).hamiltonian(&s.to_vec())
}

pub fn moser_vector_field(s: &UnitMoserState, f: &ForcingSpec) -> Result<UnitMoserState> {
    Ok(UnitMoserState::from_slice(&vector_field(&MoserSystem::new(f), &s.to_vec())?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoserSample {
    pub s: f64,
    pub state: UnitMoserState,
    pub action: f64,
}

/// Integrates the rescaled flow for fictitious time `s_end` (or until the
/// physical time advances by `t_advance`), re-projecting onto the constraints.
pub fn integrate_moser(
    x0: &UnitMoserState,
    f: &ForcingSpec,
    s_end: f64,
    t_advance: Option<f64>,
    stride: Option<f64>,
    tol: &Tolerances,
) -> Result<Vec<MoserSample>> {
    let sys = MoserSystem::new(f);
    let flow = HamiltonianFlow::new(&sys, true);
    let m = 2 * sys.dof();
    let mut y0 = x0.to_vec();
    y0.push(0.0);
    let t0 = x0.physical_time();
    let phys_t = |y: &[f64]| UnitMoserState::from_slice(&y[..m]).physical_time();
    let mut samples = vec![MoserSample { s: 0.0, state: x0.clone(), action: 0.0 }];
    let mut next = 1usize;
    let mut reached = false;
    let record = |samples: &mut Vec<MoserSample>, s: f64, y: &[f64]| {
        samples.push(MoserSample { s, state: UnitMoserState::from_slice(&y[..m]), action: y[m] });
    };
    let out = integrate(&flow, 0.0, &y0, s_end, tol, |st| {
        let mut stop_at = None;
        if let Some(dt) = t_advance {
            let target = t0 + dt;
            if phys_t(st.y1) >= target {
                if let Some((s, _)) = locate_root(st, |_, y| phys_t(y) - target, 1e-14 * st.s1().max(1.0))? {
                    stop_at = Some(s);
                }
            }
        }
        let upto = stop_at.unwrap_or(st.s1());
        if let Some(h) = stride {
            while next as f64 * h <= upto {
                let y = st.eval(next as f64 * h)?;
                record(&mut samples, next as f64 * h, &y);
                next += 1;
            }
        }
        if let Some(s) = stop_at {
            reached = true;
            let y = st.eval(s)?;
            record(&mut samples, s, &y);
            return Ok(StepAction::Stop(s));
        }
        if stride.is_none() {
            record(&mut samples, st.s1(), st.y1);
        }
        let c = sys.constraints(&st.y1[..m]);
        let drift = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if drift > MAX_CONSTRAINT_DRIFT {
            return Err(Error::ConstraintDrift(drift));
        }
        if drift > 1e-13 {
            let mut y = st.y1.to_vec();
            sys.project(&mut y[..m]);
            return Ok(StepAction::Replace(y));
        }
        Ok(StepAction::Continue)
    })?;
    if t_advance.is_some() && !reached {
        return Err(Error::Integration("physical time target not reached".into()));
    }
    if samples.last().is_none_or(|x| x.s < out.s) {
        record(&mut samples, out.s, &out.y);
    }
    Ok(samples)
}

/// Geodesic flow of `|v|^2 / 2` on `T*S^d` of radius `r`, ambiently extended.
#[derive(Clone, Copy, Debug)]
pub struct GeodesicSystem {
    pub d: usize,
    pub r: f64,
}

impl CanonicalSystem for GeodesicSystem {
    fn dof(&self) -> usize {
        self.d + 1
    }

    fn hamiltonian<S: Scalar>(&self, x: &[S]) -> S {
        let m = self.d + 1;
        let u = &x[..m];
        let v = &x[m..];
        let un2 = norm_sq(u);
        let uv = dot(u, v);
        // v projected to the tangent space and scaled as under u -> r u / |u|.
        let vt: Vec<S> = (0..m).map(|i| v[i].clone() - u[i].clone() * uv.clone() / un2.clone()).collect();
        norm_sq(&vt) * un2 / (self.r * self.r) * 0.5
    }

    fn time_slot(&self) -> usize {
        0
    }

    fn physical_q<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        x[..self.d + 1].to_vec()
    }

    fn physical_t<S: Scalar>(&self, x: &[S]) -> S {
        x[0].clone()
    }

    fn physical_p(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x[self.d + 1..].to_vec())
    }
}

/// Return time of the great-circle flow through `(u0, v0)`, by integration.
pub fn geodesic_return_time(sys: &GeodesicSystem, u0: &[f64], v0: &[f64], tol: &Tolerances) -> Result<f64> {
    let flow = HamiltonianFlow::new(sys, false);
    let mut y0 = u0.to_vec();
    y0.extend_from_slice(v0);
    let m = sys.d + 1;
    let speed = norm(v0);
    let circumference = std::f64::consts::TAU * sys.r;
    let g = |y: &[f64]| (0..m).map(|i| (y[i] - u0[i]) * v0[i]).sum::<f64>();
    let mut found = None;
    integrate(&flow, 0.0, &y0, 2.0 * circumference / speed, tol, |st| {
        if st.s0 > 0.0 && g(st.y0) < 0.0 && g(st.y1) >= 0.0 {
            if let Some((s, _)) = locate_root(st, |_, y| g(y), 1e-15 * st.s1())? {
                found = Some(s);
                return Ok(StepAction::Stop(s));
            }
        }
        Ok(StepAction::Continue)
    })?;
    found.ok_or_else(|| Error::Integration("no return to the initial point".into()))
}

/// `eps |q| U(q, t)` on the unit-sphere picture, without the Kepler part.
fn perturbation_term(sys: &MoserSystem, x: &[f64]) -> f64 {
    let (uh, vh, phys_t, tau) = sys.reduced(x);
    let r = (2.0 * tau).sqrt();
    let qn = norm(&vh) * (1.0 - uh[sys.d]) / r;
    let q = sys.q_of(&uh, &vh, &tau);
    sys.forcing.epsilon * qn * sys.forcing.value(&q, phys_t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VanishingReport {
    /// Fitted constant `max |K| / rho^4` with `rho^2 = sum_i u_i^2`.
    pub c0: f64,
    /// `(rho, max |K| / rho^4)` for shrinking distances `rho` from the pole.
    pub ratios: Vec<(f64, f64)>,
    /// Largest first, second and third finite-difference derivatives at the pole.
    pub derivatives: [f64; 3],
}

/// Samples the perturbation term near the north pole for `tau >= tau_star`
/// on the zero level and reports its quartic vanishing.
pub fn perturbation_vanishing_check(f: &ForcingSpec, tau_star: f64, eps_tilde: f64) -> Result<VanishingReport> {
    check_tau(tau_star)?;
    let d = f.dim;
    let sys = MoserSystem::new(f);
    let term = |u_tan: &[f64], vdir: &[f64], tau: f64, t: f64| -> f64 {
        // Point on the unit sphere near the pole and a tangent covector on the zero level.
        let s2: f64 = u_tan.iter().map(|x| x * x).sum();
        let mut u = u_tan.to_vec();
        u.push((1.0 - s2).max(0.0).sqrt());
        let mut v = vdir.to_vec();
        v.push(0.0);
        let mut vv = v.clone();
        let mut uu = u.clone();
        project_unit(&mut uu, &mut vv);
        let vn = norm(&vv);
        let scale = 1.0 / ((2.0 * tau).sqrt() * vn);
        let vv: Vec<f64> = vv.iter().map(|x| x * scale).collect();
        let state = UnitMoserState { u: uu, v: vv, t, tau };
        perturbation_term(&sys, &state.to_vec())
    };
    let dirs: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .chain(std::iter::once(vec![1.0 / (d as f64).sqrt(); d]))
        .collect();
    let taus = [tau_star, 2.0 * tau_star, 4.0 * tau_star];
    let times = [0.0, 0.17, 0.5, 0.83];
    let mut ratios = Vec::new();
    let mut c0: f64 = 0.0;
    let mut rho = eps_tilde.sqrt();
    for _ in 0..5 {
        let mut worst: f64 = 0.0;
        for dir in &dirs {
            for vdir in &dirs {
                for &tau in &taus {
                    for &t in &times {
                        let ut: Vec<f64> = dir.iter().map(|x| x * rho).collect();
                        let k = term(&ut, vdir, tau, t).abs();
                        worst = worst.max(k / rho.powi(4));
                    }
                }
            }
        }
        c0 = c0.max(worst);
        ratios.push((rho, worst));
        rho *= 0.5;
    }
    // Finite-difference derivatives along lines through the pole.
    let h = 1e-5;
    let mut derivatives = [0.0f64; 3];
    for dir in &dirs {
        for &tau in &taus {
            let f_at = |s: f64| {
                let ut: Vec<f64> = dir.iter().map(|x| x * s).collect();
                term(&ut, &dirs[0], tau, 0.17)
            };
            let (fm2, fm1, f0, fp1, fp2) = (f_at(-2.0 * h), f_at(-h), f_at(0.0), f_at(h), f_at(2.0 * h));
            let d1 = (fp1 - fm1) / (2.0 * h);
            let d2 = (fp1 - 2.0 * f0 + fm1) / (h * h);
            let d3 = (fp2 - 2.0 * fp1 + 2.0 * fm1 - fm2) / (2.0 * h * h * h);
            derivatives[0] = derivatives[0].max(d1.abs());
            derivatives[1] = derivatives[1].max(d2.abs());
            derivatives[2] = derivatives[2].max(d3.abs());
        }
    }
    Ok(VanishingReport { c0, ratios, derivatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kepler::eval_extended_energy;
    use proptest::prelude::*;

    #[test]
    fn origin_of_momentum_maps_to_south_pole() {
        let (u, v) = stereo_inverse(&[0.0, 0.0], &[1.0, 0.0], 1.0);
        assert!((u[2] + 1.0).abs() < 1e-15);
        assert!((v[0] - 0.5).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn north_pole_is_rejected() {
        assert_eq!(stereo_project(&[0.0, 0.0, 1.0], &[0.3, 0.1, 0.0], 1.0), Err(Error::NorthPole));
    }

    #[test]
    fn unit_hamiltonian_matches_time_changed_energy() {
        let f = ForcingSpec::rotating_linear(3, 1.0, 0.4);
        let x = CartesianExtState { q: vec![0.3, -0.5, 0.2], p: vec![0.7, 0.1, -0.4], t: 0.61, tau: 0.9 };
        let s = unit_from_physical(&x).unwrap();
        let qn = norm(&x.q);
        let expect = qn * eval_extended_energy(&x, &f);
        assert!((unit_hamiltonian(&s, &f) - expect).abs() < 1e-13);
        let m = moser_from_physical(&x).unwrap();
        assert!((moser_hamiltonian(&m, &f).unwrap() - expect).abs() < 1e-13);
        assert!((unit_q_norm(&s) - qn).abs() < 1e-14);
    }

    #[test]
    fn great_circle_period_in_geodesic_time() {
        for &d in &[2usize, 3] {
            for &fl in &[0.3, 0.5, 1.7] {
                let r = (2.0 * fl).sqrt();
                let sys = GeodesicSystem { d, r };
                let mut u0 = vec![0.0; d + 1];
                u0[0] = r * 0.6;
                u0[d] = r * 0.8;
                let mut v0 = vec![0.0; d + 1];
                v0[1] = 1.0 / (2.0 * fl);
                let period = geodesic_return_time(&sys, &u0, &v0, &Tolerances::default()).unwrap();
                let expect = std::f64::consts::TAU * r.powi(3);
                assert!((period - expect).abs() < 1e-9 * expect, "{d} {fl}: {period} vs {expect}");
            }
        }
    }

    #[test]
    fn forcing_vanishes_quartically_at_pole() {
        let f = ForcingSpec::rotating_linear(2, 1.0, 1.0);
        let rep = perturbation_vanishing_check(&f, 1.0, 1e-2).unwrap();
        let first = rep.ratios[0].1;
        let last = rep.ratios.last().unwrap().1;
        assert!(last <= 1.5 * first + 1e-12);
        assert!(rep.derivatives.iter().all(|&x| x < 1e-6), "{:?}", rep.derivatives);
    }

    #[test]
    fn unit_chart_preserves_liouville_form_on_loops() {
        // Closed loops with varying tau: both forms differ by an exact differential.
        let loop_at = |c: f64, th: f64| CartesianExtState {
            q: vec![0.4 + 0.1 * th.cos(), -0.2 + 0.15 * (2.0 * th).sin() + c],
            p: vec![0.5 - 0.2 * th.sin(), 0.8 + 0.1 * th.cos()],
            t: 0.3 + 0.2 * th.sin(),
            tau: 0.6 + 0.3 * (th + c).cos(),
        };
        let n = 256;
        let h = 1e-6;
        for &c in &[0.0, 0.1, 0.3] {
            let mut phys = 0.0;
            let mut unit = 0.0;
            for k in 0..n {
                let th = std::f64::consts::TAU * k as f64 / n as f64;
                let (x0, xp, xm) = (loop_at(c, th), loop_at(c, th + h), loop_at(c, th - h));
                let dq: Vec<f64> = (0..2).map(|i| (xp.q[i] - xm.q[i]) / (2.0 * h)).collect();
                phys += fdot(&x0.p, &dq) - x0.t * (xp.tau - xm.tau) / (2.0 * h);
                let (s0, sp, sm) = (
                    unit_from_physical(&x0).unwrap(),
                    unit_from_physical(&xp).unwrap(),
                    unit_from_physical(&xm).unwrap(),
                );
                let du: Vec<f64> = (0..3).map(|i| (sp.u[i] - sm.u[i]) / (2.0 * h)).collect();
                unit += fdot(&s0.v, &du) - s0.t * (sp.tau - sm.tau) / (2.0 * h);
            }
            let scale = std::f64::consts::TAU / n as f64;
            assert!(((phys - unit) * scale).abs() < 1e-8, "{c}: {} vs {}", phys * scale, unit * scale);
        }
    }

    #[test]
    fn half_tau_rescaling_is_identity() {
        let x = CartesianExtState { q: vec![0.3, 0.4], p: vec![-0.2, 0.9], t: 0.1, tau: 0.5 };
        let m = moser_from_physical(&x).unwrap();
        let s = rescale_to_unit_sphere(&m).unwrap();
        for i in 0..3 {
            assert!((m.u[i] - s.u[i]).abs() < 1e-15 && (m.v[i] - s.v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn constraints_hold_over_long_integration() {
        let f = ForcingSpec::rotating_linear(3, 0.05, 1.0);
        let x = CartesianExtState { q: vec![0.6, 0.0, 0.1], p: vec![0.0, 1.2, 0.2], t: 0.0, tau: 0.7 };
        let s0 = unit_from_physical(&x).unwrap();
        let h0 = unit_hamiltonian(&s0, &f);
        let out = integrate_moser(&s0, &f, 100.0, None, None, &Tolerances::default()).unwrap();
        for smp in &out {
            assert!(smp.state.constraint_drift() < 1e-8);
        }
        let h1 = unit_hamiltonian(&out.last().unwrap().state, &f);
        assert!((h1 - h0).abs() < 1e-9);
    }

    #[test]
    fn planar_flow_agrees_with_levi_civita() {
        use crate::levi_civita::{integrate_lc, lc_from_physical, physical_from_lc, Branch, LcOptions, LcStop};
        let f = ForcingSpec::rotating_linear(2, 0.1, 1.0);
        let x = CartesianExtState { q: vec![0.5, 0.1], p: vec![-0.3, 1.1], t: 0.0, tau: 0.0 };
        let x = CartesianExtState { tau: -crate::kepler::eval_energy(&x, &f), ..x };
        let dt = 0.8;
        let lc = integrate_lc(&lc_from_physical(&x, Branch::Plus).unwrap(), &f, LcStop::TimeAdvance(dt), &LcOptions::default())
            .unwrap();
        let a = physical_from_lc(&lc.last().state).unwrap();
        let ms = integrate_moser(&unit_from_physical(&x).unwrap(), &f, 1e4, Some(dt), None, &Tolerances::default()).unwrap();
        let b = physical_from_unit(&ms.last().unwrap().state).unwrap();
        for i in 0..2 {
            assert!((a.q[i] - b.q[i]).abs() < 1e-8, "{:?} vs {:?}", a.q, b.q);
            assert!((a.p[i] - b.p[i]).abs() < 1e-8);
        }
        assert!((a.t - b.t).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn stereographic_round_trip(x1 in -3.0f64..3.0, x2 in -3.0f64..3.0, x3 in -3.0f64..3.0,
                                    y1 in -3.0f64..3.0, y2 in -3.0f64..3.0, y3 in -3.0f64..3.0,
                                    r in 0.2f64..3.0) {
            let (u, v) = stereo_inverse(&[x1, x2, x3], &[y1, y2, y3], r);
            prop_assert!((norm(&u) - r).abs() < 1e-12 * r);
            prop_assert!(fdot(&u, &v).abs() < 1e-11);
            let (x, y) = stereo_project(&u, &v, r).unwrap();
            for (a, b) in x.iter().zip([x1, x2, x3]) { prop_assert!((a - b).abs() < 1e-11); }
            for (a, b) in y.iter().zip([y1, y2, y3]) { prop_assert!((a - b).abs() < 1e-11); }
        }

        #[test]
        fn unit_picture_round_trip(q1 in -2.0f64..2.0, q2 in -2.0f64..2.0, p1 in -2.0f64..2.0,
                                   p2 in -2.0f64..2.0, t in -1.0f64..1.0, tau in 0.05f64..4.0) {
            prop_assume!(q1 * q1 + q2 * q2 > 1e-2);
            let x = CartesianExtState { q: vec![q1, q2], p: vec![p1, p2], t, tau };
            let s = unit_from_physical(&x).unwrap();
            prop_assert!(s.constraint_drift() < 1e-13);
            let back = physical_from_unit(&s).unwrap();
            for i in 0..2 {
                prop_assert!((back.q[i] - x.q[i]).abs() < 1e-11);
                prop_assert!((back.p[i] - x.p[i]).abs() < 1e-11);
            }
            prop_assert!((back.t - t).abs() < 1e-13);
        }
    }
}
