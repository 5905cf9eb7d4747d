//! Cartesian forced Kepler dynamics, Kepler's equation and orbital elements.

pub mod forcing;

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, OdeSystem, StepAction, Tolerances};
pub use forcing::{normalize_forcing, CallbackForcing, ForcingKind, ForcingSpec, Monomial, TrigCoefficient};

/// States closer than this to the origin are rejected by the Cartesian flow.
pub const COLLISION_FLOOR: f64 = 1e-6;

/// Point `(q, p, t, tau)` of the extended phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartesianExtState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
    pub tau: f64,
}

impl CartesianExtState {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut y = self.q.clone();
        y.extend_from_slice(&self.p);
        y.push(self.t);
        y.push(self.tau);
        y
    }

    pub fn from_slice(y: &[f64]) -> Self {
        let d = (y.len() - 2) / 2;
        CartesianExtState { q: y[..d].to_vec(), p: y[d..2 * d].to_vec(), t: y[2 * d], tau: y[2 * d + 1] }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `F = |p|^2/2 - 1/|q| + eps U(q, t)`.
pub fn eval_energy(x: &CartesianExtState, f: &ForcingSpec) -> f64 {
    let r = norm(&x.q);
    let kin = 0.5 * x.p.iter().map(|v| v * v).sum::<f64>();
    let pert = if f.is_zero() { 0.0 } else { f.epsilon * f.value(&x.q, x.t) };
    kin - 1.0 / r + pert
}

/// Extended Hamiltonian `F + tau`, constant along the flow.
pub fn eval_extended_energy(x: &CartesianExtState, f: &ForcingSpec) -> f64 {
    eval_energy(x, f) + x.tau
}

/// Time derivative of `(q, p, t, tau)`.
pub fn cartesian_vector_field(x: &CartesianExtState, f: &ForcingSpec) -> Result<CartesianExtState> {
    let mut dy = vec![0.0; 2 * x.dim() + 2];
    cartesian_rhs(&x.to_vec(), f, &mut dy)?;
    Ok(CartesianExtState::from_slice(&dy))
}

fn cartesian_rhs(y: &[f64], f: &ForcingSpec, dy: &mut [f64]) -> Result<()> {
    let d = (y.len() - 2) / 2;
    let (q, p, t) = (&y[..d], &y[d..2 * d], y[2 * d]);
    let r = norm(q);
    if r < COLLISION_FLOOR {
        return Err(Error::CollisionProximity { radius: COLLISION_FLOOR });
    }
    f.check_domain(q)?;
    let r3 = r * r * r;
    dy[..d].copy_from_slice(p);
    for i in 0..d {
        dy[d + i] = -q[i] / r3;
    }
    dy[2 * d] = 1.0;
    dy[2 * d + 1] = 0.0;
    if !f.is_zero() {
        // Hamiltonian sign convention: p' = -dF/dq, tau' = -dF/dt.
        let g = f.grad_q(q, t);
        for i in 0..d {
            dy[d + i] -= f.epsilon * g[i];
        }
        dy[2 * d + 1] = -f.epsilon * f.dt(q, t);
    }
    Ok(())
}

pub struct CartesianSystem<'a> {
    pub forcing: &'a ForcingSpec,
}

impl OdeSystem for CartesianSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.forcing.dim + 2
    }
    fn rhs(&self, _s: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        cartesian_rhs(y, self.forcing, dy)
    }
}

/// Integrates the physical flow up to time `t_end`, sampling every `stride`.
pub fn integrate_cartesian(
    x0: &CartesianExtState,
    f: &ForcingSpec,
    t_end: f64,
    stride: f64,
    tol: &Tolerances,
) -> Result<Vec<CartesianExtState>> {
    let sys = CartesianSystem { forcing: f };
    let (samples, _) = crate::integrator::integrate_sampled(&sys, x0.t, &x0.to_vec(), t_end, stride, tol)?;
    Ok(samples.into_iter().map(|(_, y)| CartesianExtState::from_slice(&y)).collect())
}

/// Integrates the physical flow and returns the final state.
pub fn propagate_cartesian(x0: &CartesianExtState, f: &ForcingSpec, t_end: f64, tol: &Tolerances) -> Result<CartesianExtState> {
    let sys = CartesianSystem { forcing: f };
    let out = integrate(&sys, x0.t, &x0.to_vec(), t_end, tol, |_| Ok(StepAction::Continue))?;
    Ok(CartesianExtState::from_slice(&out.y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Orientation {
    Planar { retrograde: bool },
    Spatial { inclination: f64, node: f64 },
}

/// Keplerian elements with `mu = 1`. `l` is the mean anomaly at `t = 0`
/// and `g` the argument of pericenter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitalElements {
    pub a: f64,
    pub e: f64,
    pub g: f64,
    pub l: f64,
    #[serde(default)]
    pub orientation: Orientation,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::Planar { retrograde: false }
    }
}

impl OrbitalElements {
    pub fn planar(a: f64, e: f64, g: f64, l: f64) -> Self {
        OrbitalElements { a, e, g, l, orientation: Orientation::Planar { retrograde: false } }
    }

    pub fn dim(&self) -> usize {
        match self.orientation {
            Orientation::Planar { .. } => 2,
            Orientation::Spatial { .. } => 3,
        }
    }

    pub fn mean_motion(&self) -> f64 {
        self.a.powf(-1.5)
    }

    pub fn period(&self) -> f64 {
        TAU * self.a.powf(1.5)
    }
}

/// Solves `E - e sin E = M` for `E`.
pub fn solve_kepler_equation(mean_anomaly: f64, e: f64) -> Result<f64> {
    let m = mean_anomaly.rem_euclid(TAU);
    let (mut lo, mut hi) = (m - e, m + e);
    let mut x = if e < 0.8 { m + e * m.sin() } else { std::f64::consts::PI };
    x = x.clamp(lo, hi);
    for _ in 0..100 {
        let f = x - e * x.sin() - m;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let fp = 1.0 - e * x.cos();
        let mut next = x - f / fp;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * next.abs().max(1.0) || hi - lo < 1e-16 {
            return Ok(next + (mean_anomaly - m));
        }
        x = next;
    }
    Err(Error::NoConvergence(mean_anomaly))
}

fn rot2(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn spatial_rotation(node: f64, inc: f64, g: f64) -> [[f64; 3]; 3] {
    let (so, co) = node.sin_cos();
    let (si, ci) = inc.sin_cos();
    let (sg, cg) = g.sin_cos();
    [
        [co * cg - so * ci * sg, -co * sg - so * ci * cg, so * si],
        [so * cg + co * ci * sg, -so * sg + co * ci * cg, -co * si],
        [si * sg, si * cg, ci],
    ]
}

/// Unperturbed Kepler state at time `t`.
pub fn kepler_solve(el: &OrbitalElements, t: f64) -> Result<CartesianExtState> {
    if !(el.a > 0.0) || !(0.0..1.0).contains(&el.e) {
        return Err(Error::InvalidInput(format!("need a > 0 and 0 <= e < 1, got a = {}, e = {}", el.a, el.e)));
    }
    let n = el.mean_motion();
    let big_e = solve_kepler_equation(el.l + n * t, el.e)?;
    let (se, ce) = big_e.sin_cos();
    let b = (1.0 - el.e * el.e).sqrt();
    let denom = 1.0 - el.e * ce;
    let pos = [el.a * (ce - el.e), el.a * b * se];
    let vel = [-el.a * n * se / denom, el.a * n * b * ce / denom];
    let (q, p) = match el.orientation {
        Orientation::Planar { retrograde } => {
            let sgn = if retrograde { -1.0 } else { 1.0 };
            let qp = rot2([pos[0], sgn * pos[1]], el.g);
            let vp = rot2([vel[0], sgn * vel[1]], el.g);
            (qp.to_vec(), vp.to_vec())
        }
        Orientation::Spatial { inclination, node } => {
            let r = spatial_rotation(node, inclination, el.g);
            let q = (0..3).map(|i| r[i][0] * pos[0] + r[i][1] * pos[1]).collect();
            let p = (0..3).map(|i| r[i][0] * vel[0] + r[i][1] * vel[1]).collect();
            (q, p)
        }
    };
    Ok(CartesianExtState { q, p, t, tau: 0.5 / el.a })
}

/// Inverse of [`kepler_solve`] for the state's own time.
pub fn state_from_elements(el: &OrbitalElements, t: f64) -> Result<CartesianExtState> {
    kepler_solve(el, t)
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean anomaly from true anomaly.
pub fn mean_from_true(nu: f64, e: f64) -> f64 {
    let b = (1.0 - e * e).sqrt();
    let den = 1.0 + e * nu.cos();
    let se = b * nu.sin() / den;
    let ce = (e + nu.cos()) / den;
    let big_e = se.atan2(ce);
    big_e - e * se
}

/// Elements of the osculating Kepler orbit through `x` (ignoring forcing).
pub fn elements_from_state(x: &CartesianExtState) -> Result<OrbitalElements> {
    let d = x.dim();
    let r = norm(&x.q);
    if r == 0.0 {
        return Err(Error::CollisionPoint);
    }
    let energy = 0.5 * dot(&x.p, &x.p) - 1.0 / r;
    if energy >= 0.0 {
        return Err(Error::HyperbolicOrParabolic { energy });
    }
    let a = -0.5 / energy;
    let (q3, p3): (Vec<f64>, Vec<f64>) = match d {
        2 => (vec![x.q[0], x.q[1], 0.0], vec![x.p[0], x.p[1], 0.0]),
        3 => (x.q.clone(), x.p.clone()),
        _ => return Err(Error::InvalidInput(format!("elements need d = 2 or 3, got {d}"))),
    };
    let h = cross3(&q3, &p3);
    let hn = norm(&h);
    if hn < 1e-13 * a.sqrt() {
        return Err(Error::RectilinearOrbit);
    }
    let pxh = cross3(&p3, &h);
    let ev: Vec<f64> = (0..3).map(|i| pxh[i] - q3[i] / r).collect();
    let e = norm(&ev);
    let hhat: Vec<f64> = h.iter().map(|v| v / hn).collect();

    let (orientation, nodev) = if d == 2 {
        (Orientation::Planar { retrograde: h[2] < 0.0 }, vec![1.0, 0.0, 0.0])
    } else {
        let inc = hhat[2].clamp(-1.0, 1.0).acos();
        let nv = [-h[1], h[0], 0.0];
        let nn = norm(&nv);
        if nn < 1e-13 * hn {
            (Orientation::Spatial { inclination: inc, node: 0.0 }, vec![1.0, 0.0, 0.0])
        } else {
            let node = nv[1].atan2(nv[0]).rem_euclid(TAU);
            (Orientation::Spatial { inclination: inc, node }, nv.iter().map(|v| v / nn).collect())
        }
    };
    // In-plane angles are measured in the direction of motion from the node line.
    let angle_from_node = |v: &[f64]| -> f64 {
        let c = cross3(&nodev, v);
        dot(&c, &hhat).atan2(dot(&nodev, v))
    };
    let (g, nu) = if e < 1e-14 {
        (0.0, angle_from_node(&q3))
    } else {
        let g = angle_from_node(&ev);
        let ehat: Vec<f64> = ev.iter().map(|v| v / e).collect();
        let c = cross3(&ehat, &q3);
        (g, dot(&c, &hhat).atan2(dot(&ehat, &q3)))
    };
    let g = if d == 2 && h[2] < 0.0 {
        // Planar retrograde orbits store the pericenter direction as a plain polar angle.
        ev[1].atan2(ev[0])
    } else {
        g
    };
    let g = if e < 1e-14 { 0.0 } else { g.rem_euclid(TAU) };
    let m_now = mean_from_true(nu, e);
    let l = (m_now - a.powf(-1.5) * x.t).rem_euclid(TAU);
    Ok(OrbitalElements { a, e, g, l, orientation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ang_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    #[test]
    fn circular_orbit_at_quarter_period() {
        let el = OrbitalElements::planar(1.0, 0.0, 0.0, 0.0);
        let x = kepler_solve(&el, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((x.q[0]).abs() < 1e-12 && (x.q[1] - 1.0).abs() < 1e-12);
        assert!((x.p[0] + 1.0).abs() < 1e-12 && x.p[1].abs() < 1e-12);
    }

    #[test]
    fn eccentric_orbit_returns_after_one_period() {
        let el = OrbitalElements::planar(1.0, 0.9, 0.0, 0.0);
        let x0 = kepler_solve(&el, 0.0).unwrap();
        let x1 = kepler_solve(&el, TAU).unwrap();
        for i in 0..2 {
            assert!((x0.q[i] - x1.q[i]).abs() < 1e-12);
            assert!((x0.p[i] - x1.p[i]).abs() < 1e-12);
        }
        assert!((x0.q[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn kepler_equation_near_parabolic() {
        for &m in &[1e-8, 0.01, 1.0, 3.0, 6.2] {
            let e = 0.999_999;
            let big_e = solve_kepler_equation(m, e).unwrap();
            assert!((big_e - e * big_e.sin() - m).abs() < 1e-14);
        }
    }

    #[test]
    fn energy_components() {
        let x = CartesianExtState { q: vec![2.0, 0.0], p: vec![0.0, 0.5], t: 0.0, tau: 0.375 };
        let f = ForcingSpec::zero(2);
        assert!((eval_energy(&x, &f) + 0.375).abs() < 1e-15);
        assert!(eval_extended_energy(&x, &f).abs() < 1e-15);
    }

    #[test]
    fn collision_floor_is_enforced() {
        let x = CartesianExtState { q: vec![1e-7, 0.0], p: vec![0.0, 1.0], t: 0.0, tau: 0.5 };
        let f = ForcingSpec::zero(2);
        assert!(matches!(cartesian_vector_field(&x, &f), Err(Error::CollisionProximity { .. })));
    }

    #[test]
    fn rectilinear_and_hyperbolic_are_rejected() {
        let x = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.3, 0.0], t: 0.0, tau: 0.5 };
        assert_eq!(elements_from_state(&x), Err(Error::RectilinearOrbit));
        let y = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.0, 1.5], t: 0.0, tau: 0.5 };
        assert!(matches!(elements_from_state(&y), Err(Error::HyperbolicOrParabolic { .. })));
    }

    #[test]
    fn unit_circle_elements() {
        let x = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.0, 1.0], t: 0.0, tau: 0.5 };
        let el = elements_from_state(&x).unwrap();
        assert!((el.a - 1.0).abs() < 1e-14 && el.e < 1e-14);
    }

    #[test]
    fn forced_flow_conserves_extended_energy() {
        let f = ForcingSpec::rotating_linear(2, 1.0, 0.05);
        let x0 = kepler_solve(&OrbitalElements::planar(0.7, 0.3, 0.4, 1.0), 0.0).unwrap();
        let mut x0 = x0;
        x0.tau = -eval_energy(&x0, &f);
        let x1 = propagate_cartesian(&x0, &f, 2.5, &Tolerances::default()).unwrap();
        assert!(eval_extended_energy(&x1, &f).abs() < 1e-11);
    }

    proptest! {
        #[test]
        fn planar_elements_round_trip(a in 0.2f64..5.0, e in 0.0f64..0.95, g in 0.0f64..TAU,
                                      l in 0.0f64..TAU, retro in any::<bool>(), t in -3.0f64..3.0) {
            let el = OrbitalElements { a, e, g, l, orientation: Orientation::Planar { retrograde: retro } };
            let x = kepler_solve(&el, t).unwrap();
            let back = elements_from_state(&x).unwrap();
            prop_assert!((back.a - a).abs() < 1e-11 * a);
            prop_assert!((back.e - e).abs() < 1e-11);
            if e > 1e-6 {
                prop_assert!(ang_diff(back.g, g) < 1e-9);
            }
            let lam = |x: &OrbitalElements| x.l + x.g;
            prop_assert!(ang_diff(lam(&back), lam(&el)) < 1e-9);
            prop_assert_eq!(back.orientation, el.orientation);
        }

        #[test]
        fn spatial_elements_round_trip(a in 0.2f64..5.0, e in 0.01f64..0.9, g in 0.0f64..TAU,
                                       l in 0.0f64..TAU, inc in 0.05f64..3.09, node in 0.0f64..TAU) {
            let el = OrbitalElements { a, e, g, l, orientation: Orientation::Spatial { inclination: inc, node } };
            let x = kepler_solve(&el, 0.7).unwrap();
            let back = elements_from_state(&x).unwrap();
            prop_assert!((back.a - a).abs() < 1e-11 * a);
            prop_assert!((back.e - e).abs() < 1e-11);
            prop_assert!(ang_diff(back.g, g) < 1e-9);
            prop_assert!(ang_diff(back.l, l) < 1e-9);
            if let Orientation::Spatial { inclination, node: nd } = back.orientation {
                prop_assert!((inclination - inc).abs() < 1e-11);
                prop_assert!(ang_diff(nd, node) < 1e-10);
            } else {
                prop_assert!(false);
            }
        }
    }
}
