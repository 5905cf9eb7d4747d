//! Action-angle variables of the regularized Kepler problem, the periodic
//! manifolds `Lambda_n`, and classical Delaunay-type charts.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kepler::{elements_from_state, kepler_solve, solve_kepler_equation, CartesianExtState, OrbitalElements, Orientation};
use crate::levi_civita::LcState;

/// Action-angle variables of the two Levi-Civita oscillators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcActionAngle {
    pub i1: f64,
    pub i2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub tau: f64,
    pub t_tilde: f64,
}

impl LcActionAngle {
    pub fn l_cal(&self) -> f64 {
        self.i1 + self.i2
    }

    pub fn j_cal(&self) -> f64 {
        self.i1 - self.i2
    }

    pub fn delta(&self) -> f64 {
        0.5 * (self.theta1 + self.theta2)
    }

    pub fn gamma(&self) -> f64 {
        0.5 * (self.theta1 - self.theta2)
    }

    /// Builds from the fast/slow pairs `(L, delta)`, `(J, gamma)`.
    pub fn from_fast_slow(l_cal: f64, delta: f64, j_cal: f64, gamma: f64, tau: f64, t_tilde: f64) -> Self {
        LcActionAngle {
            i1: 0.5 * (l_cal + j_cal),
            i2: 0.5 * (l_cal - j_cal),
            theta1: delta + gamma,
            theta2: delta - gamma,
            tau,
            t_tilde,
        }
    }

    /// Unperturbed regularized energy `(sqrt 2 / 2) L sqrt(tau) - 1`.
    pub fn h0(&self) -> f64 {
        std::f64::consts::FRAC_1_SQRT_2 * self.l_cal() * self.tau.sqrt() - 1.0
    }
}

fn oscillator_scales(tau: f64) -> (f64, f64) {
    let q = (2.0 * tau).powf(0.25);
    (1.0 / q, 2.0 * q)
}

/// Action and (when the action is positive) angle of one oscillator.
pub fn oscillator_action_angle(z: f64, w: f64, tau: f64) -> Result<(f64, Option<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::NonpositiveTau(tau));
    }
    let (cz, cw) = oscillator_scales(tau);
    let c = z / cz;
    let s = -w / cw;
    let i = c * c + s * s;
    let theta = if i > 0.0 { Some(s.atan2(c).rem_euclid(TAU)) } else { None };
    Ok((i, theta))
}

/// Full action-angle chart; fails when either action vanishes.
pub fn lc_to_action_angle(s: &LcState) -> Result<LcActionAngle> {
    let (i1, th1) = oscillator_action_angle(s.z[0], s.w[0], s.tau)?;
    let (i2, th2) = oscillator_action_angle(s.z[1], s.w[1], s.tau)?;
    let scale = (i1 + i2).max(f64::MIN_POSITIVE);
    let (theta1, theta2) = match (th1, th2) {
        (Some(a), Some(b)) if i1 > 1e-14 * scale && i2 > 1e-14 * scale => (a, b),
        _ => return Err(Error::DegenerateAction),
    };
    let shift = (i1 * (2.0 * theta1).sin() + i2 * (2.0 * theta2).sin()) / (4.0 * s.tau);
    Ok(LcActionAngle { i1, i2, theta1, theta2, tau: s.tau, t_tilde: s.t - shift })
}

pub fn action_angle_to_lc(a: &LcActionAngle) -> Result<LcState> {
    if !(a.tau > 0.0) {
        return Err(Error::NonpositiveTau(a.tau));
    }
    if a.i1 < 0.0 || a.i2 < 0.0 {
        return Err(Error::InvalidInput("actions must be nonnegative".into()));
    }
    let (cz, cw) = oscillator_scales(a.tau);
    let (r1, r2) = (a.i1.sqrt(), a.i2.sqrt());
    let shift = (a.i1 * (2.0 * a.theta1).sin() + a.i2 * (2.0 * a.theta2).sin()) / (4.0 * a.tau);
    Ok(LcState {
        z: [cz * r1 * a.theta1.cos(), cz * r2 * a.theta2.cos()],
        w: [-cw * r1 * a.theta1.sin(), -cw * r2 * a.theta2.sin()],
        t: a.t_tilde + shift,
        tau: a.tau,
    })
}

/// Closed-form data of the periodic manifold `Lambda_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaData {
    pub n: u32,
    pub l_n: f64,
    pub tau_n: f64,
    pub s_n: f64,
    pub action: f64,
}

pub fn lambda_n(n: u32) -> Result<LambdaData> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let nf = n as f64;
    let c = nf.cbrt();
    let pi13 = PI.cbrt();
    let two13 = 2f64.cbrt();
    Ok(LambdaData {
        n,
        l_n: two13 * two13 / (pi13 * c),
        tau_n: pi13 * pi13 * c * c / two13,
        s_n: TAU.cbrt().powi(2) / c,
        action: 3.0 * pi13 * pi13 * c * c / two13,
    })
}

/// Fast-frequency and clock-rate of the unperturbed flow at `(L, tau)`.
pub fn lc_frequencies(l_cal: f64, tau: f64) -> (f64, f64) {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    (s2 * tau.sqrt(), 0.5 * s2 * l_cal / tau.sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HessianReport {
    pub hessian: Vec<Vec<f64>>,
    pub determinant: f64,
    pub nondegenerate: bool,
}

/// Determinants below this magnitude classify as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-8;

/// Ridders extrapolation of a central-difference estimate `est(h)`.
fn ridders(est: impl Fn(f64) -> f64, h0: f64) -> f64 {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 12;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = est(h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = est(h);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

/// Hessian by extrapolated central differences, with its determinant.
pub fn hessian_nondegeneracy(h: impl Fn(&[f64]) -> f64, point: &[f64]) -> HessianReport {
    let n = point.len();
    let mut m = vec![vec![0.0; n]; n];
    let at = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut x = point.to_vec();
        x[di] += si;
        x[dj] += sj;
        h(&x)
    };
    for i in 0..n {
        let scale = 0.1 * point[i].abs().max(0.1);
        m[i][i] = ridders(
            |s| (at(i, s, i, 0.0) - 2.0 * h(point) + at(i, -s, i, 0.0)) / (s * s),
            scale,
        );
        for j in 0..i {
            let sj = 0.1 * point[j].abs().max(0.1);
            let r = sj / scale;
            let v = ridders(
                |s| {
                    let t = s * r;
                    (at(i, s, j, t) - at(i, s, j, -t) - at(i, -s, j, t) + at(i, -s, j, -t)) / (4.0 * s * t)
                },
                scale,
            );
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    let det = DMatrix::from_fn(n, n, |i, j| m[i][j]).determinant();
    HessianReport { hessian: m, determinant: det, nondegenerate: det.abs() > DEGENERACY_THRESHOLD }
}

/// Planar Delaunay variables (signed `G`) or spatial ones with `(H, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaunayState {
    pub big_l: f64,
    pub l: f64,
    pub big_g: f64,
    pub g: f64,
    /// `(H, h) = (G cos i, node)` for spatial orbits.
    pub spatial: Option<(f64, f64)>,
}

impl DelaunayState {
    pub fn eccentricity(&self) -> f64 {
        (1.0 - (self.big_g / self.big_l).powi(2)).max(0.0).sqrt()
    }

    pub fn inclination(&self) -> Option<f64> {
        self.spatial.map(|(h, _)| (h / self.big_g).clamp(-1.0, 1.0).acos())
    }
}

const CIRCULAR_TOL: f64 = 1e-10;

/// Delaunay variables of the osculating orbit; `l` is the current mean anomaly.
pub fn delaunay_from_cartesian(x: &CartesianExtState) -> Result<DelaunayState> {
    let now = CartesianExtState { t: 0.0, ..x.clone() };
    let el = elements_from_state(&now)?;
    if el.e < CIRCULAR_TOL {
        return Err(Error::CircularOrbit);
    }
    let big_l = el.a.sqrt();
    let gabs = big_l * (1.0 - el.e * el.e).sqrt();
    Ok(match el.orientation {
        Orientation::Planar { retrograde } => DelaunayState {
            big_l,
            l: el.l,
            big_g: if retrograde { -gabs } else { gabs },
            g: el.g,
            spatial: None,
        },
        Orientation::Spatial { inclination, node } => DelaunayState {
            big_l,
            l: el.l,
            big_g: gabs,
            g: el.g,
            spatial: Some((gabs * inclination.cos(), node)),
        },
    })
}

/// Cartesian state at time `t` whose current mean anomaly is `d.l`.
pub fn cartesian_from_delaunay(d: &DelaunayState, t: f64) -> Result<CartesianExtState> {
    if !(d.big_l > 0.0) || d.big_g.abs() > d.big_l {
        return Err(Error::InvalidInput("need L > 0 and |G| <= L".into()));
    }
    if d.big_g == 0.0 {
        return Err(Error::RectilinearOrbit);
    }
    let a = d.big_l * d.big_l;
    let orientation = match d.spatial {
        None => Orientation::Planar { retrograde: d.big_g < 0.0 },
        Some((h, node)) => Orientation::Spatial { inclination: (h / d.big_g).clamp(-1.0, 1.0).acos(), node },
    };
    let n = a.powf(-1.5);
    let el = OrbitalElements { a, e: d.eccentricity(), g: d.g, l: d.l - n * t, orientation };
    kepler_solve(&el, t)
}

/// Poincare variables near direct circular orbits: `xi + i eta = sqrt(2(L - G)) e^{-ig}`.
/// Canonical pairs are `(lambda, L)` and `(eta, xi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareState {
    pub big_l: f64,
    pub lambda: f64,
    pub xi: f64,
    pub eta: f64,
}

pub fn poincare_from_delaunay(d: &DelaunayState) -> Result<PoincareState> {
    let gap = d.big_l - d.big_g;
    if gap < 0.0 {
        return Err(Error::InvalidInput("G exceeds L".into()));
    }
    if (d.big_l + d.big_g).abs() <= CIRCULAR_TOL * d.big_l {
        return Err(Error::RetrogradeCircular);
    }
    let rho = (2.0 * gap).sqrt();
    Ok(PoincareState {
        big_l: d.big_l,
        lambda: (d.l + d.g).rem_euclid(TAU),
        xi: rho * d.g.cos(),
        eta: -rho * d.g.sin(),
    })
}

pub fn delaunay_from_poincare(p: &PoincareState) -> Result<DelaunayState> {
    let r2 = p.xi * p.xi + p.eta * p.eta;
    if r2 == 0.0 {
        return Err(Error::CircularOrbit);
    }
    let big_g = p.big_l - 0.5 * r2;
    if big_g <= -p.big_l * (1.0 - CIRCULAR_TOL) {
        return Err(Error::RetrogradeCircular);
    }
    let g = (-p.eta).atan2(p.xi).rem_euclid(TAU);
    Ok(DelaunayState { big_l: p.big_l, l: (p.lambda - g).rem_euclid(TAU), big_g, g, spatial: None })
}

fn planar_check(x: &CartesianExtState) -> Result<()> {
    if x.dim() != 2 {
        return Err(Error::InvalidInput("Poincare chart is planar".into()));
    }
    Ok(())
}

/// Energy, semimajor axis, angular momentum and eccentricity vector of a planar state.
fn planar_invariants(x: &CartesianExtState) -> Result<(f64, f64, [f64; 2])> {
    let r = x.q[0].hypot(x.q[1]);
    if r == 0.0 {
        return Err(Error::CollisionPoint);
    }
    let energy = 0.5 * (x.p[0] * x.p[0] + x.p[1] * x.p[1]) - 1.0 / r;
    if energy >= 0.0 {
        return Err(Error::HyperbolicOrParabolic { energy });
    }
    let a = -0.5 / energy;
    let g = x.q[0] * x.p[1] - x.q[1] * x.p[0];
    let ev = [g * x.p[1] - x.q[0] / r, -g * x.p[0] - x.q[1] / r];
    Ok((a, g, ev))
}

/// Poincare variables computed without passing through `g`, so they stay
/// smooth across direct circular orbits.
pub fn poincare_from_cartesian(x: &CartesianExtState) -> Result<PoincareState> {
    planar_check(x)?;
    let (a, big_g, ev) = planar_invariants(x)?;
    if big_g <= 0.0 {
        return poincare_from_delaunay(&delaunay_from_cartesian(x)?);
    }
    let big_l = a.sqrt();
    let (k, h) = (ev[0], ev[1]);
    let e2 = k * k + h * h;
    let root = (1.0 - e2).max(0.0).sqrt();
    let beta = 1.0 / (1.0 + root);
    // Eccentric longitude from the equinoctial position formulas.
    let (bx, by) = (x.q[0] / a + k, x.q[1] / a + h);
    let (m11, m12, m22) = (1.0 - beta * h * h, beta * h * k, 1.0 - beta * k * k);
    let det = m11 * m22 - m12 * m12;
    let cf = (m22 * bx - m12 * by) / det;
    let sf = (m11 * by - m12 * bx) / det;
    let f = sf.atan2(cf);
    let lambda = (f - k * f.sin() + h * f.cos()).rem_euclid(TAU);
    let scale = (2.0 * big_l * beta).sqrt();
    Ok(PoincareState { big_l, lambda, xi: scale * k, eta: -scale * h })
}

/// Inverse of [`poincare_from_cartesian`], at time `t`.
pub fn cartesian_from_poincare(p: &PoincareState, t: f64) -> Result<CartesianExtState> {
    let r2 = p.xi * p.xi + p.eta * p.eta;
    let big_g = p.big_l - 0.5 * r2;
    if big_g <= 0.0 {
        return cartesian_from_delaunay(&delaunay_from_poincare(p)?, t);
    }
    let a = p.big_l * p.big_l;
    let beta_scale = |e2: f64| 1.0 / (1.0 + (1.0 - e2).sqrt());
    // Recover (k, h): xi = sqrt(2 L beta) k, eta = -sqrt(2 L beta) h, with e^2 = 1 - (G/L)^2.
    let e2 = 1.0 - (big_g / p.big_l).powi(2);
    let beta = beta_scale(e2);
    let s = (2.0 * p.big_l * beta).sqrt();
    let (k, h) = (p.xi / s, -p.eta / s);
    // Generalized Kepler equation lambda = F - k sin F + h cos F.
    let mut f = p.lambda;
    for _ in 0..60 {
        let (sf, cf) = f.sin_cos();
        let res = f - k * sf + h * cf - p.lambda;
        let step = res / (1.0 - k * cf - h * sf);
        f -= step;
        if step.abs() < 1e-16 {
            break;
        }
    }
    let (sf, cf) = f.sin_cos();
    let q = [
        a * ((1.0 - beta * h * h) * cf + beta * h * k * sf - k),
        a * ((1.0 - beta * k * k) * sf + beta * h * k * cf - h),
    ];
    let r = a * (1.0 - k * cf - h * sf);
    let nm = a.powf(-1.5);
    let c = a * a * nm / r;
    let v = [c * (beta * h * k * cf - (1.0 - beta * h * h) * sf), c * ((1.0 - beta * k * k) * cf - beta * h * k * sf)];
    Ok(CartesianExtState { q: q.to_vec(), p: v.to_vec(), t, tau: 0.5 / a })
}

/// Point `(e_x, e_y, G / sqrt(a))` on the unit orbit sphere of a planar bound orbit.
pub fn orbit_sphere_point(x: &CartesianExtState) -> Result<[f64; 3]> {
    planar_check(x)?;
    let (a, g, ev) = planar_invariants(x)?;
    Ok([ev[0], ev[1], g / a.sqrt()])
}

/// Eccentricity vector and angular momentum of the orbit at a sphere point.
pub fn orbit_from_sphere_point(x: [f64; 3], a: f64) -> ([f64; 2], f64) {
    ([x[0], x[1]], x[2] * a.sqrt())
}

/// Tilted Delaunay variables adapted to a rotation axis of the orbit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltedDelaunay {
    pub big_l: f64,
    pub l: f64,
    pub big_g: f64,
    pub g: f64,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Minimal rotation taking `axis` to the north pole.
fn align_to_pole(axis: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    let z = [0.0, 0.0, 1.0];
    let c = dot3(axis, z);
    if c <= -1.0 + 1e-12 {
        return Err(Error::InvalidInput("axis antipodal to the pole".into()));
    }
    let v = cross(axis, z);
    let k = 1.0 / (1.0 + c);
    let mut r = [[0.0; 3]; 3];
    let vx = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            let mut vx2 = 0.0;
            for m in 0..3 {
                vx2 += vx[i][m] * vx[m][j];
            }
            r[i][j] = f64::from(u8::from(i == j)) + vx[i][j] + k * vx2;
        }
    }
    Ok(r)
}

/// `(n x x) . dx / (1 + n . x)`: the area primitive singular only at `-n`.
fn area_primitive(n: [f64; 3], x: [f64; 3], dx: [f64; 3]) -> f64 {
    dot3(cross(n, x), dx) / (1.0 + dot3(n, x))
}

/// Gauss-Legendre nodes and weights on `[0, 1]` (16 points).
fn gauss_legendre_16() -> ([f64; 16], [f64; 16]) {
    const X: [f64; 8] = [
        0.0950125098376374,
        0.2816035507792589,
        0.4580167776572274,
        0.6178762444026438,
        0.755404408355003,
        0.8656312023878318,
        0.9445750230732326,
        0.9894009349916499,
    ];
    const W: [f64; 8] = [
        0.1894506104550685,
        0.1826034150449236,
        0.1691565193950025,
        0.1495959888165767,
        0.1246289712555339,
        0.0951585116824928,
        0.0622535239386479,
        0.0271524594117541,
    ];
    let mut x = [0.0; 16];
    let mut w = [0.0; 16];
    for i in 0..8 {
        x[i] = 0.5 * (1.0 - X[i]);
        w[i] = 0.5 * W[i];
        x[8 + i] = 0.5 * (1.0 + X[i]);
        w[8 + i] = 0.5 * W[i];
    }
    (x, w)
}

/// Gauge function making the tilted chart canonical: integral of the
/// difference of the two area primitives from the pole to `x`.
fn tilt_phase(axis: [f64; 3], x: [f64; 3]) -> f64 {
    let z = [0.0, 0.0, 1.0];
    let c = x[2].clamp(-1.0, 1.0);
    let angle = c.acos();
    if angle < 1e-15 {
        return 0.0;
    }
    // Great circle from the pole to x.
    let perp = {
        let p = [x[0], x[1], 0.0];
        let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
        [p[0] / n, p[1] / n, 0.0]
    };
    let (nodes, weights) = gauss_legendre_16();
    let pieces = 8;
    let mut total = 0.0;
    for k in 0..pieces {
        let a0 = angle * k as f64 / pieces as f64;
        let len = angle / pieces as f64;
        for (s, w) in nodes.iter().zip(weights.iter()) {
            let phi = a0 + s * len;
            let (sp, cp) = phi.sin_cos();
            let pt = [sp * perp[0], sp * perp[1], cp];
            let dp = [cp * perp[0], cp * perp[1], -sp];
            total += w * len * (area_primitive(z, pt, dp) - area_primitive(axis, pt, dp));
        }
    }
    total
}

fn normalize3(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot3(v, v).sqrt();
    if !(n > 0.0) {
        return Err(Error::InvalidInput("axis must be nonzero".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Tilted Delaunay coordinates of a planar state about `axis`.
pub fn tilted_delaunay(x: &CartesianExtState, axis: [f64; 3]) -> Result<TiltedDelaunay> {
    let axis = normalize3(axis)?;
    let p = poincare_from_cartesian(x)?;
    let s = orbit_sphere_point(x)?;
    let rot = align_to_pole(axis)?;
    let xr: Vec<f64> = (0..3).map(|i| dot3(rot[i], s)).collect();
    if xr[0].hypot(xr[1]) < 1e-12 {
        return Err(Error::AxisPole);
    }
    let g = xr[1].atan2(xr[0]).rem_euclid(TAU);
    let beta = tilt_phase(axis, s);
    Ok(TiltedDelaunay {
        big_l: p.big_l,
        l: (p.lambda - g - beta).rem_euclid(TAU),
        big_g: p.big_l * xr[2],
        g,
    })
}

/// Inverse of [`tilted_delaunay`], at time `t`.
pub fn cartesian_from_tilted(td: &TiltedDelaunay, axis: [f64; 3], t: f64) -> Result<CartesianExtState> {
    let axis = normalize3(axis)?;
    let rot = align_to_pole(axis)?;
    let h = (td.big_g / td.big_l).clamp(-1.0, 1.0);
    let rho = (1.0 - h * h).sqrt();
    let xr = [rho * td.g.cos(), rho * td.g.sin(), h];
    // Inverse rotation is the transpose.
    let s: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| rot[j][i] * xr[j]).sum());
    let beta = tilt_phase(axis, s);
    let lambda = td.l + td.g + beta;
    let (ev, big_g) = orbit_from_sphere_point(s, td.big_l * td.big_l);
    if big_g > 0.0 {
        let e2 = ev[0] * ev[0] + ev[1] * ev[1];
        let scale = (2.0 * td.big_l / (1.0 + (1.0 - e2).max(0.0).sqrt())).sqrt();
        let p = PoincareState { big_l: td.big_l, lambda, xi: scale * ev[0], eta: -scale * ev[1] };
        cartesian_from_poincare(&p, t)
    } else {
        let g = ev[1].atan2(ev[0]);
        cartesian_from_delaunay(&DelaunayState { big_l: td.big_l, l: lambda - g, big_g, g, spatial: None }, t)
    }
}

/// Central-difference Jacobian with Ridders extrapolation; row `i` holds `d f_i`.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h0: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            jac[(i, j)] = ridders(
                |h| {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[j] += h;
                    xm[j] -= h;
                    let d = f(&xp)[i] - f(&xm)[i];
                    // Angles may wrap between the two evaluations.
                    let d = if d.abs() > PI { d - TAU * (d / TAU).round() } else { d };
                    d / (2.0 * h)
                },
                h0,
            );
        }
    }
    jac
}

/// Solves Kepler's equation for the eccentric anomaly of a Delaunay state.
pub fn eccentric_anomaly(d: &DelaunayState) -> Result<f64> {
    solve_kepler_equation(d.l, d.eccentricity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::symplectic_defect;
    use crate::levi_civita::{integrate_lc, lc_action, LcOptions, LcStop};
    use crate::kepler::ForcingSpec;
    use proptest::prelude::*;

    fn ang(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    #[test]
    fn single_oscillator_example() {
        let z0 = 2f64.powf(-0.25);
        let (i1, th1) = oscillator_action_angle(z0, 0.0, 1.0).unwrap();
        assert!((i1 - 1.0).abs() < 1e-15);
        assert_eq!(th1, Some(0.0));
        let (i2, th2) = oscillator_action_angle(0.0, 0.0, 1.0).unwrap();
        assert_eq!((i2, th2), (0.0, None));
        let s = LcState { z: [z0, 0.0], w: [0.0, 0.0], t: 0.0, tau: 1.0 };
        assert_eq!(lc_to_action_angle(&s), Err(Error::DegenerateAction));
    }

    #[test]
    fn lambda_one_closed_form() {
        let d = lambda_n(1).unwrap();
        assert!((d.l_n - 2f64.powf(2.0 / 3.0) * PI.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert!((d.tau_n - 2f64.powf(-1.0 / 3.0) * PI.powf(2.0 / 3.0)).abs() < 1e-15);
        assert!((d.s_n - TAU.powf(2.0 / 3.0)).abs() < 1e-14);
        assert!((d.action - 3.0 * 2f64.powf(-1.0 / 3.0) * PI.powf(2.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn lambda_energy_and_period_identities() {
        let a1 = lambda_n(1).unwrap().action;
        for n in 1..=1000 {
            let d = lambda_n(n).unwrap();
            let h0 = std::f64::consts::FRAC_1_SQRT_2 * d.l_n * d.tau_n.sqrt() - 1.0;
            assert!(h0.abs() < 1e-14, "{n}: {h0}");
            let (_, clock) = lc_frequencies(d.l_n, d.tau_n);
            assert!((d.s_n * clock - 1.0 / n as f64).abs() < 1e-14);
            assert!((d.action / (n as f64).powf(2.0 / 3.0) - a1).abs() < 1e-13);
        }
    }

    #[test]
    fn action_gap_asymptotics() {
        let a1 = lambda_n(1).unwrap().action;
        let n = 100_000u32;
        let gap = lambda_n(n + 1).unwrap().action - lambda_n(n).unwrap().action;
        assert!((gap * (n as f64).cbrt() - 2.0 / 3.0 * a1).abs() < 1e-4);
    }

    #[test]
    fn unperturbed_loop_action_matches_closed_form() {
        let f = ForcingSpec::zero(2);
        for n in 1..=3 {
            let d = lambda_n(n).unwrap();
            let aa = LcActionAngle::from_fast_slow(d.l_n, 0.3, 0.2 * d.l_n, 0.7, d.tau_n, 0.0);
            let s0 = action_angle_to_lc(&aa).unwrap();
            let traj = integrate_lc(&s0, &f, LcStop::Fictitious(n as f64 * d.s_n), &LcOptions::default()).unwrap();
            assert!((lc_action(&traj) - d.action).abs() < 1e-8, "{n}: {} vs {}", lc_action(&traj), d.action);
            let end = traj.last().state;
            assert!((end.t - s0.t - 1.0).abs() < 1e-10);
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            for k in 0..2 {
                assert!((end.z[k] - sign * s0.z[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hessian_examples() {
        let d = lambda_n(1).unwrap();
        // In (L, tau) the Hessian is 2x2 with det -1/(8 tau).
        let h_lt = |x: &[f64]| std::f64::consts::FRAC_1_SQRT_2 * x[0] * x[1].sqrt() - 1.0;
        let rep = hessian_nondegeneracy(h_lt, &[d.l_n, d.tau_n]);
        assert!((rep.determinant + 1.0 / (8.0 * d.tau_n)).abs() < 1e-8, "{}", rep.determinant);
        assert!(rep.nondegenerate);
        let lin = hessian_nondegeneracy(|x: &[f64]| x[0], &[0.3, 0.7]);
        assert!(!lin.nondegenerate);
        let quad = hessian_nondegeneracy(|x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[0.3, 0.7]);
        assert!((quad.determinant - 1.0).abs() < 1e-10);
    }

    #[test]
    fn delaunay_pericenter_example() {
        let x = CartesianExtState { q: vec![0.5, 0.0], p: vec![0.0, 3f64.sqrt()], t: 0.0, tau: 0.5 };
        let d = delaunay_from_cartesian(&x).unwrap();
        assert!((d.big_l - 1.0).abs() < 1e-14);
        assert!((d.big_g - 3f64.sqrt() / 2.0).abs() < 1e-14);
        assert!(ang(d.g, 0.0) < 1e-14 && ang(d.l, 0.0) < 1e-14);
        let circ = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.0, 1.0], t: 0.0, tau: 0.5 };
        assert_eq!(delaunay_from_cartesian(&circ), Err(Error::CircularOrbit));
    }

    #[test]
    fn poincare_examples() {
        let d = DelaunayState { big_l: 1.0, l: 0.2, big_g: 0.5, g: PI / 2.0, spatial: None };
        let p = poincare_from_delaunay(&d).unwrap();
        assert!(p.xi.abs() < 1e-15 && (p.eta + 1.0).abs() < 1e-15);
        let c = DelaunayState { big_l: 1.0, l: 0.2, big_g: 1.0, g: 0.4, spatial: None };
        let p = poincare_from_delaunay(&c).unwrap();
        assert_eq!((p.xi, p.eta), (0.0, 0.0));
        assert!((p.lambda - 0.6).abs() < 1e-15);
        let r = DelaunayState { big_l: 1.0, l: 0.2, big_g: -1.0, g: 0.4, spatial: None };
        assert_eq!(poincare_from_delaunay(&r), Err(Error::RetrogradeCircular));
        // The Cartesian route agrees at a circular orbit.
        let circ = CartesianExtState { q: vec![0.0, 2.0], p: vec![-0.5f64.sqrt(), 0.0], t: 0.0, tau: 0.25 };
        let pc = poincare_from_cartesian(&circ).unwrap();
        assert!(pc.xi.abs() < 1e-15 && pc.eta.abs() < 1e-15);
        assert!((pc.lambda - PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn orbit_sphere_special_points() {
        let circ = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.0, 1.0], t: 0.0, tau: 0.5 };
        let s = orbit_sphere_point(&circ).unwrap();
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15 && (s[2] - 1.0).abs() < 1e-15);
        let radial = CartesianExtState { q: vec![0.5, 0.0], p: vec![1.0, 0.0], t: 0.0, tau: 0.5 };
        let s = orbit_sphere_point(&radial).unwrap();
        assert!((s[0].abs() - 1.0).abs() < 1e-14 && s[1].abs() < 1e-15 && s[2].abs() < 1e-15);
    }

    #[test]
    fn tilted_reduces_to_classical() {
        let el = OrbitalElements::planar(1.3, 0.5, 0.8, 2.1);
        let x = kepler_solve(&el, 0.0).unwrap();
        let d = delaunay_from_cartesian(&x).unwrap();
        let td = tilted_delaunay(&x, [0.0, 0.0, 1.0]).unwrap();
        assert!((td.big_g - d.big_g).abs() < 1e-12);
        assert!(ang(td.g, d.g) < 1e-12 && ang(td.l, d.l) < 1e-12);
    }

    #[test]
    fn tilted_circular_orbit() {
        let alpha: f64 = 0.1;
        let axis = [alpha.sin(), 0.0, alpha.cos()];
        let circ = CartesianExtState { q: vec![1.0, 0.0], p: vec![0.0, 1.0], t: 0.0, tau: 0.5 };
        let td = tilted_delaunay(&circ, axis).unwrap();
        assert!((td.big_g - alpha.cos()).abs() < 1e-14);
        assert!(td.big_g < td.big_l);
        assert_eq!(tilted_delaunay(&circ, [0.0, 0.0, 2.0]), Err(Error::AxisPole));
        let back = cartesian_from_tilted(&td, axis, 0.0).unwrap();
        for i in 0..2 {
            assert!((back.q[i] - circ.q[i]).abs() < 1e-12 && (back.p[i] - circ.p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_chart_is_canonical() {
        let alpha: f64 = 0.3;
        let axis = [alpha.sin() * 0.6, alpha.sin() * 0.8, alpha.cos()];
        for &(l, big_g, g, big_l) in &[(0.3, 0.8, 1.1, 1.0), (2.0, 0.95, 4.0, 1.4), (5.0, 0.6, 0.2, 0.9)] {
            let x0 = [l, g, big_l, big_g];
            let map = |v: &[f64]| {
                let d = DelaunayState { big_l: v[2], l: v[0], big_g: v[3], g: v[1], spatial: None };
                let td = tilted_delaunay(&cartesian_from_delaunay(&d, 0.0).unwrap(), axis).unwrap();
                vec![td.l, td.g, td.big_l, td.big_g]
            };
            let jac = numerical_jacobian(map, &x0, 1e-3);
            assert!(symplectic_defect(&jac) < 1e-8, "{}", symplectic_defect(&jac));
        }
    }

    #[test]
    fn delaunay_and_poincare_are_canonical() {
        // (q, p) -> (l, g, L, G) and (q, p) -> (lambda, eta, L, xi).
        let x0 = [0.7, -0.3, 0.4, 1.0];
        let dmap = |v: &[f64]| {
            let d = delaunay_from_cartesian(&CartesianExtState { q: v[..2].to_vec(), p: v[2..].to_vec(), t: 0.0, tau: 0.0 }).unwrap();
            vec![d.l, d.g, d.big_l, d.big_g]
        };
        assert!(symplectic_defect(&numerical_jacobian(dmap, &x0, 1e-3)) < 1e-8);
        let pmap = |v: &[f64]| {
            let p = poincare_from_cartesian(&CartesianExtState { q: v[..2].to_vec(), p: v[2..].to_vec(), t: 0.0, tau: 0.0 }).unwrap();
            vec![p.lambda, p.eta, p.big_l, p.xi]
        };
        assert!(symplectic_defect(&numerical_jacobian(pmap, &x0, 1e-3)) < 1e-8);
        // Retrograde Delaunay with signed G.
        let xr = [0.7, -0.3, -0.4, -1.0];
        assert!(symplectic_defect(&numerical_jacobian(dmap, &xr, 1e-3)) < 1e-8);
    }

    #[test]
    fn action_angle_chart_is_canonical() {
        let x0 = [0.4, -0.3, 0.2, 0.5, 0.9, 0.7];
        let map = |v: &[f64]| {
            let a = lc_to_action_angle(&LcState::from_slice(v)).unwrap();
            vec![a.theta1, a.theta2, a.t_tilde, a.i1, a.i2, a.tau]
        };
        assert!(symplectic_defect(&numerical_jacobian(map, &x0, 1e-3)) < 1e-8);
        let fs = |v: &[f64]| {
            let a = lc_to_action_angle(&LcState::from_slice(v)).unwrap();
            vec![a.delta(), a.gamma(), a.t_tilde, a.l_cal(), a.j_cal(), a.tau]
        };
        assert!(symplectic_defect(&numerical_jacobian(fs, &x0, 1e-3)) < 1e-8);
    }

    proptest! {
        #[test]
        fn action_angle_round_trip(z1 in -1.0f64..1.0, z2 in -1.0f64..1.0, w1 in -2.0f64..2.0,
                                   w2 in -2.0f64..2.0, t in -1.0f64..1.0, tau in 0.1f64..3.0) {
            prop_assume!(z1.abs() + w1.abs() > 1e-3 && z2.abs() + w2.abs() > 1e-3);
            let s = LcState { z: [z1, z2], w: [w1, w2], t, tau };
            let a = lc_to_action_angle(&s).unwrap();
            let h0 = (w1 * w1 + w2 * w2) / 8.0 + tau * (z1 * z1 + z2 * z2) - 1.0;
            prop_assert!((a.h0() - h0).abs() < 1e-12);
            prop_assert!(a.l_cal() >= a.j_cal().abs());
            let b = action_angle_to_lc(&a).unwrap();
            for k in 0..2 {
                prop_assert!((b.z[k] - s.z[k]).abs() < 1e-12);
                prop_assert!((b.w[k] - s.w[k]).abs() < 1e-12);
            }
            prop_assert!((b.t - t).abs() < 1e-12);
        }

        #[test]
        fn delaunay_round_trip(a in 0.3f64..3.0, e in 0.01f64..0.9, g in 0.0f64..TAU, l in 0.0f64..TAU,
                               retro in proptest::bool::ANY, t in -1.0f64..1.0) {
            let el = OrbitalElements { a, e, g, l, orientation: Orientation::Planar { retrograde: retro } };
            let x = kepler_solve(&el, t).unwrap();
            let d = delaunay_from_cartesian(&x).unwrap();
            let y = cartesian_from_delaunay(&d, t).unwrap();
            for i in 0..2 {
                prop_assert!((x.q[i] - y.q[i]).abs() < 1e-11 && (x.p[i] - y.p[i]).abs() < 1e-11);
            }
        }

        #[test]
        fn spatial_delaunay_round_trip(a in 0.3f64..3.0, e in 0.01f64..0.9, g in 0.0f64..TAU, l in 0.0f64..TAU,
                                       inc in 0.1f64..3.0, node in 0.0f64..TAU) {
            let el = OrbitalElements { a, e, g, l, orientation: Orientation::Spatial { inclination: inc, node } };
            let x = kepler_solve(&el, 0.0).unwrap();
            let d = delaunay_from_cartesian(&x).unwrap();
            prop_assert!((d.inclination().unwrap() - inc).abs() < 1e-10);
            let y = cartesian_from_delaunay(&d, 0.0).unwrap();
            for i in 0..3 {
                prop_assert!((x.q[i] - y.q[i]).abs() < 1e-11 && (x.p[i] - y.p[i]).abs() < 1e-11);
            }
        }

        #[test]
        fn poincare_round_trip(a in 0.3f64..3.0, e in 0.0f64..0.9, g in 0.0f64..TAU, l in 0.0f64..TAU) {
            let x = kepler_solve(&OrbitalElements::planar(a, e, g, l), 0.3).unwrap();
            let p = poincare_from_cartesian(&x).unwrap();
            prop_assert!((p.xi * p.xi + p.eta * p.eta - 2.0 * (p.big_l - p.big_l * (1.0 - e * e).sqrt())).abs() < 1e-12);
            let y = cartesian_from_poincare(&p, 0.3).unwrap();
            for i in 0..2 {
                prop_assert!((x.q[i] - y.q[i]).abs() < 1e-11 && (x.p[i] - y.p[i]).abs() < 1e-11);
            }
            if e > 0.05 {
                let pd = poincare_from_delaunay(&delaunay_from_cartesian(&x).unwrap()).unwrap();
                prop_assert!(ang(pd.lambda, p.lambda) < 1e-10);
                prop_assert!((pd.xi - p.xi).abs() < 1e-10 && (pd.eta - p.eta).abs() < 1e-10);
            }
        }

        #[test]
        fn orbit_sphere_on_unit_sphere(a in 0.3f64..3.0, e in 0.0f64..0.99, g in 0.0f64..TAU, l in 0.0f64..TAU,
                                       retro in proptest::bool::ANY) {
            let el = OrbitalElements { a, e, g, l, orientation: Orientation::Planar { retrograde: retro } };
            let s = orbit_sphere_point(&kepler_solve(&el, 0.0).unwrap()).unwrap();
            prop_assert!((dot3(s, s) - 1.0).abs() < 1e-13);
        }
    }
}
