//! Restricted three-body problem recast as a forced Kepler problem in the
//! frame centered at one primary.
//!
//! Units: the primaries' mutual period is 1 and lengths are scaled so the
//! centered primary has gravitational parameter 1.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Scalar;
use crate::kepler::{kepler_solve, CartesianExtState, ForcingKind, ForcingSpec, OrbitalElements};

/// Domain radius as a fraction of the minimal primary separation.
pub const DEFAULT_DOMAIN_FRACTION: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Center {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryOrbit {
    pub m1: f64,
    pub m2: f64,
    #[serde(default)]
    pub e: f64,
    #[serde(default = "two")]
    pub dim: usize,
    #[serde(default = "first")]
    pub center: Center,
}

fn two() -> usize {
    2
}

fn first() -> Center {
    Center::First
}

impl PrimaryOrbit {
    pub fn new(m1: f64, m2: f64, e: f64) -> Self {
        PrimaryOrbit { m1, m2, e, dim: 2, center: Center::First }
    }

    fn masses(&self) -> (f64, f64) {
        match self.center {
            Center::First => (self.m1, self.m2),
            Center::Second => (self.m2, self.m1),
        }
    }

    /// Physical length corresponding to one normalized unit.
    pub fn length_scale(&self) -> f64 {
        self.masses().0.cbrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m1 > 0.0 && self.m2 > 0.0) {
            return Err(Error::InvalidInput("primary masses must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.e) {
            return Err(Error::InvalidInput(format!("primary eccentricity {} outside [0, 1)", self.e)));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidInput("RTBP dimension must be 2 or 3".into()));
        }
        Ok(())
    }
}

/// Tidal potential of the non-centered primary, evaluated in the moving frame.
#[derive(Clone, Debug)]
pub struct RtbpForcing {
    /// Mass of the non-centered primary relative to the centered one.
    pub mu: f64,
    pub a_rel: f64,
    pub e: f64,
    dim: usize,
    rel: OrbitalElements,
}

impl RtbpForcing {
    pub fn new(orbit: &PrimaryOrbit) -> Result<Self> {
        orbit.validate()?;
        let (mc, mo) = orbit.masses();
        let mu = mo / mc;
        let a_rel = ((1.0 + mu) / (TAU * TAU)).cbrt();
        // Relative orbit expressed through a unit-mu Kepler orbit with rescaled time.
        let rel = OrbitalElements::planar(1.0, orbit.e, 0.0, 0.0);
        Ok(RtbpForcing { mu, a_rel, e: orbit.e, dim: orbit.dim, rel })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn min_separation(&self) -> f64 {
        self.a_rel * (1.0 - self.e)
    }

    /// Position, velocity and acceleration of the other primary relative to the centered one.
    pub fn relative(&self, t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        // Unit orbit has period 2 pi; map time and lengths.
        let x = kepler_solve(&self.rel, TAU * t).expect("elliptic relative orbit");
        let a = self.a_rel;
        let mut r = [0.0; 3];
        let mut v = [0.0; 3];
        for i in 0..2 {
            r[i] = a * x.q[i];
            v[i] = a * TAU * x.p[i];
        }
        let rn = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let k = -(1.0 + self.mu) / (rn * rn * rn);
        let acc = [k * r[0], k * r[1], 0.0];
        (r, v, acc)
    }

    /// Normalized tidal potential: vanishes with its gradient at the origin.
    pub fn potential<S: Scalar>(&self, q: &[S], t: &S) -> S {
        let tv = t.value();
        let (r, v, acc) = self.relative(tv);
        let rs: Vec<S> = (0..self.dim).map(|i| t.chain(r[i], v[i], acc[i])).collect();
        let mut dist2 = S::cst(0.0);
        let mut r2 = S::cst(0.0);
        let mut qr = S::cst(0.0);
        for i in 0..self.dim {
            let di = q[i].clone() - rs[i].clone();
            dist2 = dist2 + di.clone() * di;
            r2 = r2 + rs[i].clone() * rs[i].clone();
            qr = qr + q[i].clone() * rs[i].clone();
        }
        let rn = r2.sqrt();
        let r3 = rn.clone() * r2;
        (dist2.sqrt().recip() * -1.0 + rn.recip() + qr / r3) * self.mu
    }
}

/// Forcing spec for the RTBP with the default domain ball.
pub fn build_rtbp_forcing(orbit: &PrimaryOrbit) -> Result<ForcingSpec> {
    build_rtbp_forcing_with_domain(orbit, DEFAULT_DOMAIN_FRACTION)
}

pub fn build_rtbp_forcing_with_domain(orbit: &PrimaryOrbit, fraction: f64) -> Result<ForcingSpec> {
    let f = RtbpForcing::new(orbit)?;
    let rho = fraction * f.min_separation();
    Ok(ForcingSpec::new(orbit.dim, 1.0, ForcingKind::Rtbp(std::sync::Arc::new(f))).with_rho(rho))
}

/// Inertial (barycentric, normalized) positions and velocities of the centered
/// primary and the other primary.
pub fn primary_positions(f: &RtbpForcing, t: f64) -> ([f64; 3], [f64; 3], [f64; 3], [f64; 3]) {
    let (r, v, _) = f.relative(t);
    let wc = f.mu / (1.0 + f.mu);
    let wo = 1.0 / (1.0 + f.mu);
    let xc = r.map(|x| -wc * x);
    let vc = v.map(|x| -wc * x);
    let xo = r.map(|x| wo * x);
    let vo = v.map(|x| wo * x);
    (xc, vc, xo, vo)
}

/// Inertial barycentric state of the massless body.
pub fn shift_to_inertial(f: &RtbpForcing, x: &CartesianExtState) -> (Vec<f64>, Vec<f64>) {
    let (xc, vc, _, _) = primary_positions(f, x.t);
    let q = x.q.iter().enumerate().map(|(i, v)| v + xc[i]).collect();
    let p = x.p.iter().enumerate().map(|(i, v)| v + vc[i]).collect();
    (q, p)
}

/// Inertial acceleration of a massless body at barycentric position `pos`.
pub fn inertial_acceleration(f: &RtbpForcing, pos: &[f64], t: f64) -> Vec<f64> {
    let (xc, _, xo, _) = primary_positions(f, t);
    let mut acc = vec![0.0; pos.len()];
    for (x, m) in [(xc, 1.0), (xo, f.mu)] {
        let d: Vec<f64> = (0..pos.len()).map(|i| pos[i] - x[i]).collect();
        let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..pos.len() {
            acc[i] -= m * d[i] / (r * r * r);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_primaries_separation_is_constant() {
        let f = RtbpForcing::new(&PrimaryOrbit::new(1.0, 1e-3, 0.0)).unwrap();
        for k in 0..10 {
            let (r, _, _) = f.relative(k as f64 * 0.1);
            let rn = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!((rn - f.a_rel).abs() < 1e-14);
        }
        assert!((f.a_rel - (1.001f64 / (TAU * TAU)).cbrt()).abs() < 1e-15);
    }

    #[test]
    fn primaries_are_periodic_and_balanced() {
        let f = RtbpForcing::new(&PrimaryOrbit::new(1.0, 0.1, 0.3)).unwrap();
        let (a0, _, b0, _) = primary_positions(&f, 0.2);
        let (a1, _, b1, _) = primary_positions(&f, 1.2);
        for i in 0..2 {
            assert!((a0[i] - a1[i]).abs() < 1e-12 && (b0[i] - b1[i]).abs() < 1e-12);
            assert!((a0[i] + f.mu * b0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn tidal_potential_vanishes_to_second_order() {
        let f = RtbpForcing::new(&PrimaryOrbit::new(1.0, 1e-2, 0.2)).unwrap();
        let u1: f64 = f.potential(&[1e-2, 5e-3], &0.3);
        let u2: f64 = f.potential(&[1e-3, 5e-4], &0.3);
        assert!(u1.abs() < 10.0 * 1e-4);
        assert!((u2 / u1 - 1e-2).abs() < 1e-3);
        let u0: f64 = f.potential(&[0.0, 0.0], &0.3);
        assert_eq!(u0, 0.0);
    }

    #[test]
    fn forced_acceleration_matches_inertial_law() {
        let orbit = PrimaryOrbit::new(1.0, 1e-2, 0.2);
        let spec = build_rtbp_forcing(&orbit).unwrap();
        let f = RtbpForcing::new(&orbit).unwrap();
        let (q, t) = ([0.05, -0.03], 0.37);
        // Relative acceleration from the forced Kepler model.
        let g = spec.grad_q(&q, t);
        let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
        let rel: Vec<f64> = (0..2).map(|i| -q[i] / r.powi(3) - g[i]).collect();
        // Same from the inertial law minus the centered primary's acceleration.
        let (xc, _, _, _) = primary_positions(&f, t);
        let pos = [q[0] + xc[0], q[1] + xc[1]];
        let acc = inertial_acceleration(&f, &pos, t);
        let (_, _, accr) = f.relative(t);
        let wc = f.mu / (1.0 + f.mu);
        for i in 0..2 {
            let expect = acc[i] + wc * accr[i];
            assert!((rel[i] - expect).abs() < 1e-11, "{i}: {} vs {}", rel[i], expect);
        }
    }
}
