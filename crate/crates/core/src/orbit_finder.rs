//! Periodic orbits of the forced regularized systems: least-squares shooting
//! seeded on the periodic manifolds, continuation in `eps`, monodromy and
//! action diagnostics.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::coords::{action_angle_to_lc, lambda_n, LcActionAngle};
use crate::error::{Error, Result};
use crate::flow::{
    gradient, physical_point, physical_velocity_acceleration, symplectic_defect, TrajectoryPoint, variational_initial, vector_field, CanonicalSystem,
    HamiltonianFlow, VariationalFlow,
};
use crate::integrator::{integrate, integrate_sampled, locate_root, StepAction, Tolerances};
use crate::jet::{norm_sq, Dual, Scalar};
use crate::kepler::{kepler_solve, CartesianExtState, ForcingSpec, OrbitalElements, Orientation};
use crate::levi_civita::{integrate_lc, LcOptions, LcState, LcStop, LcSystem};
use crate::moser::{unit_from_physical, MoserSystem};
use crate::rtbp::{inertial_acceleration, primary_positions, RtbpForcing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizationKind {
    LeviCivita,
    Moser,
}

/// A regularized system that the shooting code can work with.
pub trait ShootingSystem: CanonicalSystem {
    /// Diagonal of the linear symmetry `sigma` with `phi_S(x) = sigma x + e_t` on `Lambda_n`.
    fn loop_symmetry(&self, n: u32) -> Vec<f64>;

    /// The fast action `L`, generating the fast rotation.
    fn fast_action<S: Scalar>(&self, x: &[S]) -> S;

    /// Gradients of the constraints returned by [`CanonicalSystem::constraints`].
    fn constraint_gradients(&self, _x: &[f64]) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// Regularized state of a physical state.
    fn from_physical(&self, x: &CartesianExtState) -> Result<Vec<f64>>;

    /// Dimension of the unperturbed periodic manifolds.
    fn manifold_dim(&self) -> usize;

    fn tau_slot(&self) -> usize {
        self.dof() + self.time_slot()
    }

    /// Ellipses of `Lambda_n` at pericenter at time 0, circular direct first,
    /// with their common period `n S_n`.
    fn lambda_seeds(&self, n: u32) -> Result<(Vec<Vec<f64>>, f64)> {
        let d = lambda_n(n)?;
        let dim = self.physical_q(&vec![0.0; 2 * self.dof()]).len();
        let mut seeds = Vec::new();
        for el in seed_elements(0.5 / d.tau_n, dim) {
            let mut x = self.from_physical(&kepler_solve(&el, 0.0)?)?;
            x[self.time_slot()] = 0.0;
            seeds.push(x);
        }
        Ok((seeds, n as f64 * d.s_n))
    }
}

/// Seed grid on a Kepler energy shell: circular direct and retrograde, then
/// eccentric and, in space, inclined ellipses.
pub fn seed_elements(a: f64, dim: usize) -> Vec<OrbitalElements> {
    let planar = |e: f64, g: f64, retrograde: bool| OrbitalElements {
        a,
        e,
        g,
        l: 0.0,
        orientation: if dim == 2 {
            Orientation::Planar { retrograde }
        } else {
            Orientation::Spatial { inclination: if retrograde { PI } else { 0.0 }, node: 0.0 }
        },
    };
    let mut out = vec![planar(0.0, 0.0, false), planar(0.0, 0.0, true)];
    if dim == 3 {
        for node in [0.0, 0.5 * PI] {
            out.push(OrbitalElements { a, e: 0.0, g: 0.0, l: 0.0, orientation: Orientation::Spatial { inclination: 0.5 * PI, node } });
        }
    }
    for e in [0.3, 0.6] {
        for k in 0..4 {
            for retrograde in [false, true] {
                out.push(planar(e, 0.5 * PI * k as f64, retrograde));
            }
        }
    }
    out
}

impl ShootingSystem for LcSystem {
    fn loop_symmetry(&self, n: u32) -> Vec<f64> {
        let s = if n % 2 == 0 { 1.0 } else { -1.0 };
        vec![s, s, 1.0, s, s, 1.0]
    }

    fn fast_action<S: Scalar>(&self, x: &[S]) -> S {
        let r = (x[5].clone() * 2.0).sqrt();
        let z2 = x[0].clone() * x[0].clone() + x[1].clone() * x[1].clone();
        let w2 = x[3].clone() * x[3].clone() + x[4].clone() * x[4].clone();
        r.clone() * z2 + w2 / (r * 4.0)
    }

    fn from_physical(&self, x: &CartesianExtState) -> Result<Vec<f64>> {
        Ok(crate::levi_civita::lc_from_physical(x, crate::levi_civita::Branch::Plus)?.to_vec())
    }

    fn manifold_dim(&self) -> usize {
        4
    }
}

impl ShootingSystem for MoserSystem {
    fn loop_symmetry(&self, _n: u32) -> Vec<f64> {
        vec![1.0; 2 * self.dof()]
    }

    fn fast_action<S: Scalar>(&self, x: &[S]) -> S {
        let (_, vh, _, _) = self.reduced(x);
        norm_sq(&vh).sqrt() * 2.0
    }

    fn constraint_gradients(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let m = self.d + 1;
        let n = 2 * self.dof();
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        for i in 0..m {
            g1[i] = 2.0 * x[i];
            g2[i] = x[m + 1 + i];
            g2[m + 1 + i] = x[i];
        }
        vec![g1, g2]
    }

    fn from_physical(&self, x: &CartesianExtState) -> Result<Vec<f64>> {
        Ok(unit_from_physical(x)?.to_vec())
    }

    fn manifold_dim(&self) -> usize {
        2 * self.d
    }
}

/// Localization band `(k - k^{3/2}, k + k^{3/2})`.
pub fn kappa_band(kappa: f64) -> (f64, f64) {
    let w = kappa.powf(1.5);
    (kappa - w, kappa + w)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Singular values below `cutoff * max` are dropped in the least-squares step.
    pub svd_cutoff: f64,
    pub integration: Tolerances,
    /// Reject iterates whose fast action leaves the localization band of `Lambda_n`.
    pub check_band: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 40, svd_cutoff: 1e-9, integration: Tolerances::default(), check_band: true }
    }
}

#[derive(Clone, Debug)]
pub struct ShootingProblem {
    pub regularization: RegularizationKind,
    pub forcing: ForcingSpec,
    pub n: u32,
    pub newton: NewtonOptions,
}

impl ShootingProblem {
    pub fn new(regularization: RegularizationKind, forcing: ForcingSpec, n: u32) -> Self {
        ShootingProblem { regularization, forcing, n, newton: NewtonOptions::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossingRecord {
    pub s: f64,
    pub t: f64,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub regularization: RegularizationKind,
    pub n: u32,
    pub epsilon: f64,
    /// Initial regularized state on the zero level.
    pub state: Vec<f64>,
    /// Fictitious period, the Lagrange multiplier of the action functional.
    pub period: f64,
    /// Liouville integral `int P dQ` over the loop.
    pub action: f64,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub energy: f64,
    pub t_advance: f64,
    /// Fast action at the initial state.
    pub kappa: f64,
    pub tau: f64,
    pub monodromy: Vec<Vec<f64>>,
    pub symplectic_defect: f64,
    pub max_q: f64,
    pub crossings: Vec<CrossingRecord>,
}

impl PeriodicOrbit {
    pub fn monodromy_matrix(&self) -> DMatrix<f64> {
        let m = self.monodromy.len();
        DMatrix::from_fn(m, m, |i, j| self.monodromy[i][j])
    }

    /// Eigenvalues of the monodromy as `[re, im]` pairs.
    pub fn monodromy_spectrum(&self) -> Vec<[f64; 2]> {
        let mut ev: Vec<[f64; 2]> =
            self.monodromy_matrix().complex_eigenvalues().iter().map(|c| [c.re, c.im]).collect();
        ev.sort_by(|a, b| b[0].hypot(b[1]).total_cmp(&a[0].hypot(a[1])).then(a[1].total_cmp(&b[1])));
        ev
    }

    pub fn record(&self) -> OrbitRecord {
        OrbitRecord {
            n: self.n,
            epsilon: self.epsilon,
            kappa: self.kappa,
            s: self.period,
            action: self.action,
            residual: self.residual,
            max_q: self.max_q,
            crossings: self.crossings.clone(),
            monodromy_spectrum: self.monodromy_spectrum(),
            regularization: self.regularization,
            state: self.state.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub n: u32,
    pub epsilon: f64,
    pub kappa: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub action: f64,
    pub residual: f64,
    pub max_q: f64,
    pub crossings: Vec<CrossingRecord>,
    pub monodromy_spectrum: Vec<[f64; 2]>,
    pub regularization: RegularizationKind,
    pub state: Vec<f64>,
}

/// Result of a shooting attempt, including the best iterate on failure.
#[derive(Clone, Debug)]
pub struct ShootOutcome {
    pub orbit: Option<PeriodicOrbit>,
    pub best_state: Vec<f64>,
    pub best_period: f64,
    pub history: Vec<f64>,
    pub error: Option<Error>,
}

impl ShootOutcome {
    pub fn into_result(self) -> Result<PeriodicOrbit> {
        match (self.orbit, self.error) {
            (Some(o), _) => Ok(o),
            (None, Some(e)) => Err(e),
            (None, None) => Err(Error::ShootingFailed { residual: f64::NAN }),
        }
    }
}

/// Final state and fundamental matrix of the flow over fictitious time `s`.
pub fn variational_flow<C: CanonicalSystem>(sys: &C, x0: &[f64], s: f64, tol: &Tolerances) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = x0.len();
    let flow = VariationalFlow { sys };
    let y0 = variational_initial(x0);
    let out = integrate(&flow, 0.0, &y0, s, tol, |_| Ok(StepAction::Continue))?;
    Ok((out.y[..m].to_vec(), DMatrix::from_row_slice(m, m, &out.y[m..])))
}

/// End state of the plain flow.
pub fn propagate<C: CanonicalSystem>(sys: &C, x0: &[f64], s: f64, tol: &Tolerances) -> Result<Vec<f64>> {
    let flow = HamiltonianFlow::new(sys, false);
    Ok(integrate(&flow, 0.0, x0, s, tol, |_| Ok(StepAction::Continue))?.y)
}

struct Rows {
    sigma: Vec<f64>,
    anchor: Option<(Vec<f64>, Vec<f64>)>,
}

fn residual_vec<Sys: ShootingSystem>(sys: &Sys, rows: &Rows, x0: &[f64], end: &[f64]) -> Vec<f64> {
    let m = x0.len();
    let ts = sys.time_slot();
    let mut r: Vec<f64> = (0..m).map(|i| end[i] - rows.sigma[i] * x0[i] - if i == ts { 1.0 } else { 0.0 }).collect();
    r.push(sys.hamiltonian(x0));
    r.push(x0[ts]);
    r.extend(sys.constraints(x0));
    if let Some((a, dir)) = &rows.anchor {
        r.push((0..m).map(|i| (x0[i] - a[i]) * dir[i]).sum());
    }
    r
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn band_check<Sys: ShootingSystem>(sys: &Sys, x: &[f64], n: u32) -> Result<()> {
    let kappa = lambda_n(n)?.l_n;
    let (lo, hi) = kappa_band(kappa);
    let l: f64 = sys.fast_action(x);
    let tau = x[sys.tau_slot()];
    let r = if tau > 0.0 { (2.0 / tau).sqrt() } else { f64::NAN };
    for v in [l, r] {
        if !(v > lo && v < hi) {
            return Err(Error::LeftLocalization { value: v });
        }
    }
    Ok(())
}

/// Hamiltonian vector field of the fast action at `x`.
fn fast_field<Sys: ShootingSystem>(sys: &Sys, x: &[f64]) -> Vec<f64> {
    let l = sys.fast_action(&Dual::vars(x));
    let g = l.grad(x.len());
    let mut out = vec![0.0; x.len()];
    crate::flow::symplectic_gradient(&g, &mut out);
    out
}

fn least_squares_step(jac: &DMatrix<f64>, r: &[f64], cutoff: f64) -> Vec<f64> {
    let svd = jac.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rv = DVector::from_column_slice(r);
    let eps = cutoff * smax;
    let sol = svd.solve(&rv, eps).unwrap_or_else(|_| DVector::zeros(jac.ncols()));
    sol.iter().map(|v| -v).collect()
}

/// Gauss-Newton shooting from `(seed, period)` for the system at hand.
pub fn shoot_system<Sys: ShootingSystem>(
    sys: &Sys,
    kind: RegularizationKind,
    n: u32,
    epsilon: f64,
    seed: &[f64],
    period: f64,
    opts: &NewtonOptions,
) -> ShootOutcome {
    let mut x = seed.to_vec();
    sys.project(&mut x);
    let mut s = period;
    let m = x.len();
    let rows = Rows {
        sigma: sys.loop_symmetry(n),
        anchor: if epsilon == 0.0 { Some((x.clone(), fast_field(sys, &x))) } else { None },
    };
    let mut history = Vec::new();
    let fail = |x: Vec<f64>, s: f64, history: Vec<f64>, e: Error| ShootOutcome {
        orbit: None,
        best_state: x,
        best_period: s,
        history,
        error: Some(e),
    };
    if !(period > 0.0) {
        return fail(x, s, history, Error::InvalidInput("period must be positive".into()));
    }
    let eval_res = |x: &[f64], s: f64| -> Result<Vec<f64>> {
        let end = propagate(sys, x, s, &opts.integration)?;
        Ok(residual_vec(sys, &rows, x, &end))
    };
    for _ in 0..opts.max_iter {
        let (end, phi) = match variational_flow(sys, &x, s, &opts.integration) {
            Ok(v) => v,
            Err(e) => return fail(x, s, history, e),
        };
        let r = residual_vec(sys, &rows, &x, &end);
        let rn = norm(&r);
        history.push(rn);
        if !rn.is_finite() {
            return fail(x, s, history, Error::ShootingFailed { residual: rn });
        }
        if rn < opts.tol {
            return match finish_orbit(sys, kind, n, epsilon, &x, s, rn, &history, &end, &phi, &opts.integration) {
                Ok(orbit) => ShootOutcome { orbit: Some(orbit), best_state: x, best_period: s, history, error: None },
                Err(e) => fail(x, s, history, e),
            };
        }
        let nr = r.len();
        let mut jac = DMatrix::zeros(nr, m + 1);
        let f_end = match vector_field(sys, &end) {
            Ok(v) => v,
            Err(e) => return fail(x, s, history, e),
        };
        for i in 0..m {
            for j in 0..m {
                jac[(i, j)] = phi[(i, j)] - if i == j { rows.sigma[i] } else { 0.0 };
            }
            jac[(i, m)] = f_end[i];
        }
        let (_, gh) = gradient(sys, &x);
        for j in 0..m {
            jac[(m, j)] = gh[j];
        }
        jac[(m + 1, sys.time_slot())] = 1.0;
        let mut row = m + 2;
        for g in sys.constraint_gradients(&x) {
            for j in 0..m {
                jac[(row, j)] = g[j];
            }
            row += 1;
        }
        if let Some((_, dir)) = &rows.anchor {
            for j in 0..m {
                jac[(row, j)] = dir[j];
            }
        }
        // Backtracking on the residual norm; a failed search retries with a
        // coarser pseudo-inverse, which drops ill-conditioned family directions.
        let mut accepted = None;
        let mut cutoff = opts.svd_cutoff;
        while accepted.is_none() && cutoff < 1e-3 {
            let step = least_squares_step(&jac, &r, cutoff);
            let mut lambda = 1.0;
            while lambda > 1e-4 {
                let mut xt: Vec<f64> = (0..m).map(|i| x[i] + lambda * step[i]).collect();
                sys.project(&mut xt);
                let st = s + lambda * step[m];
                if st > 0.0 {
                    if let Ok(rt) = eval_res(&xt, st) {
                        let rtn = norm(&rt);
                        if rtn.is_finite() && rtn < (1.0 - 1e-4 * lambda) * rn {
                            accepted = Some((xt, st));
                            break;
                        }
                    }
                }
                lambda *= 0.5;
            }
            cutoff *= 100.0;
        }
        match accepted {
            Some((xt, st)) => {
                if opts.check_band {
                    if let Err(e) = band_check(sys, &xt, n) {
                        return fail(xt, st, history, e);
                    }
                }
                x = xt;
                s = st;
            }
            None => return fail(x, s, history, Error::ShootingFailed { residual: rn }),
        }
    }
    let last = history.last().copied().unwrap_or(f64::NAN);
    fail(x, s, history, Error::ShootingFailed { residual: last })
}

#[allow(clippy::too_many_arguments)]
fn finish_orbit<Sys: ShootingSystem>(
    sys: &Sys,
    kind: RegularizationKind,
    n: u32,
    epsilon: f64,
    x: &[f64],
    s: f64,
    residual: f64,
    history: &[f64],
    end: &[f64],
    phi: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<PeriodicOrbit> {
    let m = x.len();
    let flow = HamiltonianFlow::new(sys, true);
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let (samples, out) = integrate_sampled(&flow, 0.0, &y0, s, s / 512.0, tol)?;
    let max_q = samples
        .iter()
        .map(|(_, y)| norm(&sys.physical_q(&y[..m])))
        .fold(0.0f64, f64::max);
    Ok(PeriodicOrbit {
        regularization: kind,
        n,
        epsilon,
        state: x.to_vec(),
        period: s,
        action: out.y[m],
        residual,
        residual_history: history.to_vec(),
        energy: sys.hamiltonian(x),
        t_advance: end[sys.time_slot()] - x[sys.time_slot()],
        kappa: sys.fast_action(x),
        tau: x[sys.tau_slot()],
        monodromy: (0..m).map(|i| (0..m).map(|j| phi[(i, j)]).collect()).collect(),
        symplectic_defect: symplectic_defect(phi),
        max_q,
        crossings: Vec::new(),
    })
}

fn lc_crossings(orbit: &PeriodicOrbit, f: &ForcingSpec, tol: &Tolerances) -> Result<Vec<CrossingRecord>> {
    let opts = LcOptions { tol: *tol, ..Default::default() };
    let traj = integrate_lc(&LcState::from_slice(&orbit.state), f, LcStop::Fictitious(orbit.period), &opts)?;
    Ok(traj
        .crossings
        .iter()
        .map(|c| {
            let u = c.z_prime;
            let n = u[0].hypot(u[1]);
            let (a, b) = (u[0] / n, u[1] / n);
            CrossingRecord { s: c.s, t: c.state.t, direction: vec![a * a - b * b, 2.0 * a * b] }
        })
        .collect())
}

/// Shoots from an explicit seed for the problem's regularization.
pub fn shoot_periodic_from(problem: &ShootingProblem, seed: &[f64], period: f64, epsilon: f64) -> ShootOutcome {
    let f = problem.forcing.with_epsilon(epsilon);
    match problem.regularization {
        RegularizationKind::LeviCivita => match LcSystem::new(&f) {
            Ok(sys) => {
                let mut out = shoot_system(&sys, problem.regularization, problem.n, epsilon, seed, period, &problem.newton);
                if let Some(o) = out.orbit.as_mut() {
                    match lc_crossings(o, &f, &problem.newton.integration) {
                        Ok(c) => o.crossings = c,
                        Err(e) => {
                            out.error = Some(e);
                            out.orbit = None;
                        }
                    }
                }
                out
            }
            Err(e) => ShootOutcome { orbit: None, best_state: seed.to_vec(), best_period: period, history: vec![], error: Some(e) },
        },
        RegularizationKind::Moser => {
            let sys = MoserSystem::new(&f);
            shoot_system(&sys, problem.regularization, problem.n, epsilon, seed, period, &problem.newton)
        }
    }
}

/// Seeds on `Lambda_n` and their period; the first is the circular direct orbit.
pub fn lambda_seeds(problem: &ShootingProblem) -> Result<(Vec<Vec<f64>>, f64)> {
    let f = problem.forcing.with_epsilon(0.0);
    match problem.regularization {
        RegularizationKind::LeviCivita => LcSystem::new(&f)?.lambda_seeds(problem.n),
        RegularizationKind::Moser => MoserSystem::new(&f).lambda_seeds(problem.n),
    }
}

/// Circular direct seed on `Lambda_n` and its period.
pub fn lambda_seed(problem: &ShootingProblem) -> Result<(Vec<f64>, f64)> {
    let (mut seeds, s) = lambda_seeds(problem)?;
    Ok((seeds.swap_remove(0), s))
}

/// Shoots at `epsilon` from the seeds on `Lambda_n` in turn and returns the
/// first converged orbit. On failure, reports the circular direct attempt.
pub fn shoot_periodic(problem: &ShootingProblem, epsilon: f64) -> Result<PeriodicOrbit> {
    let (seeds, period) = lambda_seeds(problem)?;
    let mut first_err = None;
    for seed in &seeds {
        match shoot_periodic_from(problem, seed, period, epsilon).into_result() {
            Ok(o) => return Ok(o),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
        if epsilon == 0.0 {
            break;
        }
    }
    Err(first_err.expect("at least one seed"))
}

/// Smallest continuation step before giving up.
pub const MIN_CONTINUATION_STEP: f64 = 1e-6;

/// Follows the orbit from `eps = 0` through the schedule, halving steps on failure.
pub fn continuation_in_epsilon(problem: &ShootingProblem, schedule: &[f64]) -> Result<Vec<PeriodicOrbit>> {
    if schedule.first() != Some(&0.0) {
        return Err(Error::InvalidInput("continuation schedule must start at 0".into()));
    }
    let mut current = shoot_periodic(problem, 0.0)?;
    let mut out = vec![current.clone()];
    for &target in &schedule[1..] {
        let mut eps = current.epsilon;
        let mut step = target - eps;
        while eps < target {
            let trial = (eps + step).min(target);
            match shoot_periodic_from(problem, &current.state, current.period, trial).into_result() {
                Ok(o) => {
                    current = o;
                    eps = trial;
                    step = (step * 2.0).min(target - eps);
                }
                Err(_) => {
                    step *= 0.5;
                    if step < MIN_CONTINUATION_STEP {
                        return Err(Error::ContinuationStuck { last_eps: eps });
                    }
                }
            }
        }
        if target == eps && current.epsilon != target {
            current = shoot_periodic_from(problem, &current.state, current.period, target).into_result()?;
        }
        out.push(current.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub n: u32,
    pub orbit: Option<PeriodicOrbit>,
    pub error: Option<String>,
}

/// One orbit per `n`, solved in parallel. Shoots directly at the problem's
/// `eps`, falling back to continuation from `eps = 0`.
pub fn sweep_n(problem: &ShootingProblem, ns: &[u32]) -> Vec<SweepEntry> {
    let eps = problem.forcing.epsilon;
    ns.par_iter()
        .map(|&n| {
            let p = ShootingProblem { n, ..problem.clone() };
            let res = shoot_periodic(&p, eps).or_else(|_| {
                if eps == 0.0 {
                    return shoot_periodic(&p, 0.0);
                }
                let sched: Vec<f64> = (0..=4).map(|k| eps * k as f64 / 4.0).collect();
                continuation_in_epsilon(&p, &sched).map(|v| v.last().cloned().expect("nonempty"))
            });
            match res {
                Ok(o) => SweepEntry { n, orbit: Some(o), error: None },
                Err(e) => SweepEntry { n, orbit: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn power_law_exponent(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    slope.is_finite().then_some(slope)
}

/// Physical samples along one period of the orbit.
pub fn orbit_trajectory(orbit: &PeriodicOrbit, forcing: &ForcingSpec, count: usize, tol: &Tolerances) -> Result<Vec<TrajectoryPoint>> {
    let f = forcing.with_epsilon(orbit.epsilon);
    match orbit.regularization {
        RegularizationKind::LeviCivita => sample_points(&LcSystem::new(&f)?, orbit, count, tol),
        RegularizationKind::Moser => sample_points(&MoserSystem::new(&f), orbit, count, tol),
    }
}

fn sample_points<C: CanonicalSystem>(sys: &C, orbit: &PeriodicOrbit, count: usize, tol: &Tolerances) -> Result<Vec<TrajectoryPoint>> {
    let flow = HamiltonianFlow::new(sys, false);
    let (samples, _) = integrate_sampled(&flow, 0.0, &orbit.state, orbit.period, orbit.period / count.max(1) as f64, tol)?;
    Ok(samples.iter().map(|(s, y)| physical_point(sys, *s, y)).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub solution_dim: usize,
    pub expected_dim: usize,
    pub singular_values: Vec<f64>,
    pub pass: bool,
}

/// Relative rank tolerance for the monodromy test.
pub const RANK_TOL: f64 = 1e-7;

/// Dimension of `{xi in T Sigma : (sigma Dphi - I) xi in span X_H}` against
/// the expected dimension of the periodic manifold.
pub fn monodromy_nondegeneracy_check<C: CanonicalSystem>(
    sys: &C,
    x0: &[f64],
    s: f64,
    sigma: &[f64],
    constraint_grads: &[Vec<f64>],
    expected_dim: usize,
    tol: &Tolerances,
) -> Result<NondegeneracyReport> {
    if !(s > 0.0) {
        return Err(Error::InvalidInput("monodromy check needs a positive period".into()));
    }
    let m = x0.len();
    let (_, phi) = variational_flow(sys, x0, s, tol)?;
    let (_, gh) = gradient(sys, x0);
    let xh = vector_field(sys, x0)?;
    // Tangent space of the level set and constraints.
    let mut normals: Vec<Vec<f64>> = vec![gh];
    normals.extend(constraint_grads.iter().cloned());
    let nm = DMatrix::from_fn(normals.len(), m, |i, j| normals[i][j]);
    let svd = nm.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let rank_n = svd.singular_values.iter().filter(|&&v| v > 1e-12 * svd.singular_values.max()).count();
    // Full orthonormal complement via QR of the identity minus projector.
    let mut proj = DMatrix::<f64>::identity(m, m);
    for k in 0..rank_n {
        let row = vt.row(k).transpose();
        proj -= &row * row.transpose();
    }
    let psvd = proj.svd(true, false);
    let u = psvd.u.expect("u requested");
    let basis_cols: Vec<usize> = (0..m).filter(|&k| psvd.singular_values[k] > 0.5).collect();
    let b = DMatrix::from_fn(m, basis_cols.len(), |i, j| u[(i, basis_cols[j])]);
    // Remove the X_H component from the image.
    let xn = norm(&xh);
    let xhat = DVector::from_iterator(m, xh.iter().map(|v| v / xn));
    let qperp = DMatrix::<f64>::identity(m, m) - &xhat * xhat.transpose();
    let sig = DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
    let a = qperp * (sig * phi - DMatrix::<f64>::identity(m, m)) * b;
    let sv: Vec<f64> = a.svd(false, false).singular_values.iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0f64, f64::max).max(1e-300);
    let thresh = RANK_TOL * smax;
    if let Some(&amb) = sv.iter().find(|&&v| v > 0.1 * thresh && v < 10.0 * thresh) {
        return Err(Error::RankAmbiguous(amb / smax));
    }
    let rank = sv.iter().filter(|&&v| v > thresh).count();
    let solution_dim = basis_cols.len() - rank;
    let mut sorted = sv;
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(NondegeneracyReport { solution_dim, expected_dim, singular_values: sorted, pass: solution_dim == expected_dim })
}

/// Monodromy test for a converged unperturbed orbit.
pub fn orbit_nondegeneracy(orbit: &PeriodicOrbit, forcing: &ForcingSpec, tol: &Tolerances) -> Result<NondegeneracyReport> {
    let f = forcing.with_epsilon(orbit.epsilon);
    match orbit.regularization {
        RegularizationKind::LeviCivita => {
            let sys = LcSystem::new(&f)?;
            let sigma = sys.loop_symmetry(orbit.n);
            monodromy_nondegeneracy_check(&sys, &orbit.state, orbit.period, &sigma, &[], sys.manifold_dim(), tol)
        }
        RegularizationKind::Moser => {
            let sys = MoserSystem::new(&f);
            let sigma = sys.loop_symmetry(orbit.n);
            let cg = sys.constraint_gradients(&orbit.state);
            monodromy_nondegeneracy_check(&sys, &orbit.state, orbit.period, &sigma, &cg, sys.manifold_dim(), tol)
        }
    }
}

/// Derivative of periodic samples on `[0, 1)` by FFT.
fn spectral_derivative(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = vals.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k < n / 2 {
            k as f64
        } else if k == n / 2 && n % 2 == 0 {
            0.0
        } else {
            k as f64 - n as f64
        };
        *c *= Complex::new(0.0, TAU * kk);
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// `int_0^1 sum_i P_i dQ_i` over a loop sampled uniformly in normalized time.
/// `samples` holds `N + 1` states with the last equal to the first plus `winding`.
pub fn liouville_integral(samples: &[Vec<f64>], winding: &[f64]) -> Result<f64> {
    let n = samples.len() - 1;
    let m = samples[0].len();
    let dof = m / 2;
    let first = &samples[0];
    let last = &samples[n];
    let scale = first.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let gap = (0..m).map(|i| (last[i] - first[i] - winding[i]).abs()).fold(0.0f64, f64::max);
    if gap > 1e-10 * scale {
        return Err(Error::OpenLoop(gap));
    }
    let mut total = 0.0;
    for i in 0..dof {
        let periodic: Vec<f64> = (0..n).map(|k| samples[k][i] - winding[i] * k as f64 / n as f64).collect();
        let dq = spectral_derivative(&periodic);
        total += (0..n).map(|k| samples[k][dof + i] * (dq[k] + winding[i])).sum::<f64>() / n as f64;
    }
    Ok(total)
}

/// `-int u* lambda + eta int H` on a loop sampled uniformly in normalized time.
pub fn rabinowitz_action(samples: &[Vec<f64>], winding: &[f64], eta: f64, h: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let n = samples.len() - 1;
    let lio = liouville_integral(samples, winding)?;
    let mean_h = samples[..n].iter().map(|x| h(x)).sum::<f64>() / n as f64;
    Ok(-lio + eta * mean_h)
}

/// Samples of the closed loop of an orbit (doubled when the loop closes up
/// to the symmetry), the winding vector, and the number of covers.
pub fn orbit_loop(orbit: &PeriodicOrbit, forcing: &ForcingSpec, n_samples: usize, tol: &Tolerances) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize)> {
    let f = forcing.with_epsilon(orbit.epsilon);
    match orbit.regularization {
        RegularizationKind::LeviCivita => orbit_loop_with(&LcSystem::new(&f)?, orbit, n_samples, tol),
        RegularizationKind::Moser => orbit_loop_with(&MoserSystem::new(&f), orbit, n_samples, tol),
    }
}

fn orbit_loop_with<Sys: ShootingSystem>(
    sys: &Sys,
    orbit: &PeriodicOrbit,
    n_samples: usize,
    tol: &Tolerances,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize)> {
    let m = orbit.state.len();
    let sigma = sys.loop_symmetry(orbit.n);
    let covers = if sigma.iter().all(|&s| s == 1.0) { 1 } else { 2 };
    let per = n_samples / covers;
    let flow = HamiltonianFlow::new(sys, false);
    let (samples, _) = integrate_sampled(&flow, 0.0, &orbit.state, orbit.period, orbit.period / per as f64, tol)?;
    let mut pts: Vec<Vec<f64>> = samples.into_iter().map(|(_, y)| y).collect();
    pts.truncate(per + 1);
    let ts = sys.time_slot();
    if covers == 2 {
        let end = pts.pop().expect("samples");
        let mut second: Vec<Vec<f64>> = pts
            .iter()
            .map(|y| (0..m).map(|i| sigma[i] * y[i] + if i == ts { 1.0 } else { 0.0 }).collect())
            .collect();
        let close: Vec<f64> = (0..m).map(|i| sigma[i] * end[i] + if i == ts { 1.0 } else { 0.0 }).collect();
        pts.append(&mut second);
        pts.push(close);
    }
    let mut winding = vec![0.0; m];
    winding[ts] = covers as f64;
    Ok((pts, winding, covers))
}

/// Rabinowitz action of a converged orbit per single loop; equals `-orbit.action`
/// on the zero level.
pub fn orbit_rabinowitz_action(orbit: &PeriodicOrbit, forcing: &ForcingSpec, tol: &Tolerances) -> Result<f64> {
    let (pts, winding, covers) = orbit_loop(orbit, forcing, 1024, tol)?;
    let f = forcing.with_epsilon(orbit.epsilon);
    let eta = orbit.period * covers as f64;
    let val = match orbit.regularization {
        RegularizationKind::LeviCivita => {
            let sys = LcSystem::new(&f)?;
            rabinowitz_action(&pts, &winding, eta, |x| sys.hamiltonian(x))?
        }
        RegularizationKind::Moser => {
            let sys = MoserSystem::new(&f);
            rabinowitz_action(&pts, &winding, eta, |x| sys.hamiltonian(x))?
        }
    };
    Ok(val / covers as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionBoundReport {
    /// `|A^{H+K}(w) - A^H(C)|`.
    pub lhs: f64,
    /// `T_+ (max K^+ + max K^-)` over the sampled neighbourhood.
    pub bound: f64,
    pub t_plus: f64,
    pub max_k_plus: f64,
    pub max_k_minus: f64,
    pub pass: bool,
    /// Set when the bound exceeds half the gap to neighbouring actions.
    pub informative: bool,
}

/// Grid over the localization band of `Lambda_n`, all angles and times.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighbourhoodGrid {
    pub radial: usize,
    pub angular: usize,
    pub times: usize,
    /// `T_+ = n S_n + t_plus_margin / kappa_n^2`.
    pub t_plus_margin: f64,
}

impl Default for NeighbourhoodGrid {
    fn default() -> Self {
        NeighbourhoodGrid { radial: 3, angular: 12, times: 12, t_plus_margin: 1e-4 }
    }
}

/// Checks the action estimate for a perturbed orbit near `Lambda_n` in the
/// Levi-Civita chart.
pub fn action_bound_check(orbit: &PeriodicOrbit, forcing: &ForcingSpec, grid: &NeighbourhoodGrid) -> Result<ActionBoundReport> {
    if orbit.regularization != RegularizationKind::LeviCivita {
        return Err(Error::ChartExit("action bound grid uses the Levi-Civita chart".into()));
    }
    let f = forcing.with_epsilon(orbit.epsilon);
    let sys = LcSystem::new(&f)?;
    let sys0 = LcSystem::new(&f.with_epsilon(0.0))?;
    let ld = lambda_n(orbit.n)?;
    let kappa = ld.l_n;
    let (lo, hi) = kappa_band(kappa);
    let t_plus = orbit.n as f64 * ld.s_n + grid.t_plus_margin / (kappa * kappa);
    let mut kp = 0.0f64;
    let mut km = 0.0f64;
    if !f.is_zero() && f.epsilon != 0.0 {
        let lin = |k: usize, n: usize, a: f64, b: f64| if n <= 1 { 0.5 * (a + b) } else { a + (b - a) * k as f64 / (n - 1) as f64 };
        for il in 0..grid.radial {
            let l = lin(il, grid.radial, lo, hi);
            for it in 0..grid.radial {
                let rt = lin(it, grid.radial, lo, hi);
                let tau = 2.0 / (rt * rt);
                for ij in 0..=grid.angular {
                    let j = (l * (2.0 * ij as f64 / grid.angular as f64 - 1.0)).clamp(-l, l);
                    for ia in 0..grid.angular {
                        let delta = PI * ia as f64 / grid.angular as f64;
                        for ig in 0..grid.angular {
                            let gamma = PI * ig as f64 / grid.angular as f64;
                            for itime in 0..grid.times {
                                let tt = itime as f64 / grid.times as f64;
                                let aa = LcActionAngle::from_fast_slow(l, delta, j, gamma, tau, tt);
                                let x = action_angle_to_lc(&aa)?.to_vec();
                                let k = sys.hamiltonian(&x) - sys0.hamiltonian(&x);
                                kp = kp.max(k);
                                km = km.max(-k);
                            }
                        }
                    }
                }
            }
        }
    }
    let bound = t_plus * (kp + km);
    let lhs = (orbit.action - ld.action).abs();
    let gap = if orbit.n > 1 {
        (ld.action - lambda_n(orbit.n - 1)?.action).min(lambda_n(orbit.n + 1)?.action - ld.action)
    } else {
        lambda_n(2)?.action - ld.action
    };
    Ok(ActionBoundReport {
        lhs,
        bound,
        t_plus,
        max_k_plus: kp,
        max_k_minus: km,
        pass: lhs <= bound * (1.0 + 1e-6) + 1e-12,
        informative: bound < 0.5 * gap,
    })
}

/// Fast/slow action-angle quantities `(L, tau, t~)` of an LC state, over any scalar.
fn lc_slow<S: Scalar>(x: &[S]) -> (S, S, S) {
    let tau = x[5].clone();
    let r = (tau.clone() * 2.0).sqrt();
    let z2 = x[0].clone() * x[0].clone() + x[1].clone() * x[1].clone();
    let w2 = x[3].clone() * x[3].clone() + x[4].clone() * x[4].clone();
    let l = r.clone() * z2 + w2 / (r * 4.0);
    let zw = x[0].clone() * x[3].clone() + x[1].clone() * x[4].clone();
    let tt = x[2].clone() + zw / (tau.clone() * 4.0);
    (l, tau, tt)
}

fn lc_delta<S: Scalar>(x: &[S]) -> S {
    let q = (x[5].clone() * 2.0).sqrt().sqrt();
    let th = |z: &S, w: &S| S::atan2(&(w.clone() * (-0.5) / q.clone()), &(z.clone() * q.clone()));
    (th(&x[0], &x[3]) + th(&x[1], &x[4])) * 0.5
}

/// Circular direct LC state with fast action `kappa` on the zero level at `t = 0`.
pub fn localization_seed(f: &ForcingSpec, kappa: f64) -> Result<LcState> {
    let sys = LcSystem::new(f)?;
    let make = |tau: f64| {
        action_angle_to_lc(&LcActionAngle { i1: 0.5 * kappa, i2: 0.5 * kappa, theta1: 0.0, theta2: -0.5 * PI, tau, t_tilde: 0.0 })
    };
    let mut tau = 2.0 / (kappa * kappa);
    for _ in 0..50 {
        let x = make(tau)?.to_vec();
        let h = sys.hamiltonian(&x);
        let (_, g) = gradient(&sys, &x);
        // H depends on tau explicitly and through the chart scaling; differentiate numerically.
        let dt = 1e-7 * tau;
        let h2 = sys.hamiltonian(&make(tau + dt)?.to_vec());
        let dh = (h2 - h) / dt;
        let _ = g;
        let step = h / dh;
        tau -= step;
        if step.abs() < 1e-15 * tau {
            break;
        }
    }
    if !(tau > 0.0) {
        return Err(Error::NonpositiveTau(tau));
    }
    make(tau)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub kappa: f64,
    /// Fictitious time for `t~` to advance by one.
    pub s_period: f64,
    /// `|S - 4 / kappa^2| / kappa^2`.
    pub c6: f64,
    pub band: (f64, f64),
    pub l_range: (f64, f64),
    pub r_range: (f64, f64),
    pub in_band: bool,
    /// `max |L'| / kappa^4`.
    pub c1: f64,
    /// `max |tau'| / kappa^4`.
    pub c4: f64,
    /// `max |delta'| kappa / 3`, at most one when the bound holds.
    pub delta_rate: f64,
    /// `max |t~' - kappa^2 / 4| / kappa^6`.
    pub c5: f64,
    pub samples: usize,
}

/// Integrates from the circular seed with `L(0) = kappa` until `t~` has
/// advanced by one and checks the localization band along the way.
pub fn localization_check(f: &ForcingSpec, kappa: f64, tol: &Tolerances) -> Result<LocalizationReport> {
    let seed = localization_seed(f, kappa)?;
    let sys = LcSystem::new(f)?;
    let flow = HamiltonianFlow::new(&sys, false);
    let band = kappa_band(kappa);
    let y0 = seed.to_vec();
    let tt0 = lc_slow(&y0).2;
    let stride = 0.01 / (kappa * kappa);
    let mut pts: Vec<(f64, Vec<f64>)> = vec![(0.0, y0.clone())];
    let mut next = 1usize;
    let mut s_period = None;
    let target = |y: &[f64]| lc_slow(y).2 - tt0 - 1.0;
    integrate(&flow, 0.0, &y0, 100.0 / (kappa * kappa), tol, |st| {
        let mut stop = None;
        if target(st.y1) >= 0.0 {
            if let Some((s, _)) = locate_root(st, |_, y| target(y), 1e-14 * st.s1())? {
                stop = Some(s);
            }
        }
        let upto = stop.unwrap_or(st.s1());
        while next as f64 * stride <= upto {
            let s = next as f64 * stride;
            pts.push((s, st.eval(s)?));
            next += 1;
        }
        if let Some(s) = stop {
            pts.push((s, st.eval(s)?));
            s_period = Some(s);
            return Ok(StepAction::Stop(s));
        }
        pts.push((st.s1(), st.y1.to_vec()));
        Ok(StepAction::Continue)
    })?;
    let s_period = s_period.ok_or_else(|| Error::Integration("t~ did not advance by one".into()))?;
    let k2 = kappa * kappa;
    let k4 = k2 * k2;
    let mut rep = LocalizationReport {
        kappa,
        s_period,
        c6: (s_period - 4.0 / k2).abs() / k2,
        band,
        l_range: (f64::INFINITY, f64::NEG_INFINITY),
        r_range: (f64::INFINITY, f64::NEG_INFINITY),
        in_band: true,
        c1: 0.0,
        c4: 0.0,
        delta_rate: 0.0,
        c5: 0.0,
        samples: pts.len(),
    };
    let mut first_exit = None;
    for (_, y) in &pts {
        let xdot = vector_field(&sys, y)?;
        let jets = Dual::vars(y);
        let along = |j: &Dual| (0..6).map(|k| j.g[k] * xdot[k]).sum::<f64>();
        let (l, tau, tt) = lc_slow(&jets);
        let dl = lc_delta(&jets);
        let r = (2.0 / tau.v).sqrt();
        rep.l_range = (rep.l_range.0.min(l.v), rep.l_range.1.max(l.v));
        rep.r_range = (rep.r_range.0.min(r), rep.r_range.1.max(r));
        for v in [l.v, r] {
            if !(v > band.0 && v < band.1) && first_exit.is_none() {
                first_exit = Some(v);
            }
        }
        rep.c1 = rep.c1.max(along(&l).abs() / k4);
        rep.c4 = rep.c4.max(along(&tau).abs() / k4);
        rep.delta_rate = rep.delta_rate.max(along(&dl).abs() * kappa / 3.0);
        rep.c5 = rep.c5.max((along(&tt) - k2 / 4.0).abs() / (k4 * k2));
    }
    if let Some(v) = first_exit {
        return Err(Error::LeftLocalization { value: v });
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RescaledView {
    pub kappa: f64,
    /// Rescaled `(L~, delta~, J~, gamma~, tau~, t~)` at the initial state.
    pub initial: [f64; 6],
    pub l_range: (f64, f64),
    pub tau_range: (f64, f64),
    /// Liouville integral in the `(L, delta, J, gamma, tau, t~)` chart.
    pub action: f64,
    /// Same integral of the rescaled form.
    pub rescaled_action: f64,
    /// `|rescaled_action - kappa^2 action|`.
    pub scaling_defect: f64,
    /// `sup |H~_eps - H~_0|` along the orbit.
    pub max_perturbation: f64,
}

fn unwrap_angles(v: &mut [f64]) {
    for k in 1..v.len() {
        let d = v[k] - v[k - 1];
        v[k] -= TAU * (d / TAU).round();
    }
}

/// Applies `L = k L~`, `delta = k^{-3} delta~`, `(J, gamma) = k^{-1} (J~, gamma~)`,
/// `tau = k^{-2} tau~` along an LC orbit and checks the conformal factor.
pub fn rescale_orbit(orbit: &PeriodicOrbit, forcing: &ForcingSpec, kappa: f64, tol: &Tolerances) -> Result<RescaledView> {
    if orbit.regularization != RegularizationKind::LeviCivita {
        return Err(Error::ChartExit("rescaling is implemented in the Levi-Civita chart".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput("kappa must be positive".into()));
    }
    let f = forcing.with_epsilon(orbit.epsilon);
    let sys = LcSystem::new(&f)?;
    let sys0 = LcSystem::new(&f.with_epsilon(0.0))?;
    let (pts, _, covers) = orbit_loop(orbit, forcing, 1024, tol)?;
    let n = pts.len();
    let mut chart: Vec<[f64; 6]> = Vec::with_capacity(n);
    let mut th1 = Vec::with_capacity(n);
    let mut th2 = Vec::with_capacity(n);
    let mut max_pert = 0.0f64;
    for y in &pts {
        let st = LcState::from_slice(y);
        let (i1, a1) = crate::coords::oscillator_action_angle(st.z[0], st.w[0], st.tau)?;
        let (i2, a2) = crate::coords::oscillator_action_angle(st.z[1], st.w[1], st.tau)?;
        let (a1, a2) = match (a1, a2) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::ChartExit("orbit meets a degenerate action".into())),
        };
        th1.push(a1);
        th2.push(a2);
        let tt = lc_slow(y).2;
        chart.push([i1 + i2, 0.0, i1 - i2, 0.0, st.tau, tt]);
        max_pert = max_pert.max((sys.hamiltonian(y) - sys0.hamiltonian(y)).abs());
    }
    unwrap_angles(&mut th1);
    unwrap_angles(&mut th2);
    for k in 0..n {
        chart[k][1] = 0.5 * (th1[k] + th2[k]);
        chart[k][3] = 0.5 * (th1[k] - th2[k]);
    }
    let as_vec = |c: &[f64; 6]| vec![c[1], c[3], c[5], c[0], c[2], c[4]];
    let scaled = |c: &[f64; 6]| {
        [c[0] / kappa, c[1] * kappa.powi(3), c[2] * kappa, c[3] * kappa, c[4] * kappa * kappa, c[5]]
    };
    let orig: Vec<Vec<f64>> = chart.iter().map(as_vec).collect();
    let resc: Vec<Vec<f64>> = chart.iter().map(|c| as_vec(&scaled(c))).collect();
    let wind = |v: &[Vec<f64>]| -> Vec<f64> { (0..6).map(|i| v[n - 1][i] - v[0][i]).collect() };
    let mut w_orig = wind(&orig);
    let mut w_resc = wind(&resc);
    // Only angle and time coordinates wind.
    for i in 3..6 {
        w_orig[i] = 0.0;
        w_resc[i] = 0.0;
    }
    let action = liouville_integral(&orig, &w_orig)? / covers as f64;
    let rescaled_action = liouville_integral(&resc, &w_resc)? / covers as f64;
    let init = scaled(&chart[0]);
    let lr = chart.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, c| (a.0.min(c[0] / kappa), a.1.max(c[0] / kappa)));
    let tr = chart.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, c| {
        (a.0.min(c[4] * kappa * kappa), a.1.max(c[4] * kappa * kappa))
    });
    Ok(RescaledView {
        kappa,
        initial: init,
        l_range: lr,
        tau_range: tr,
        action,
        rescaled_action,
        scaling_defect: (rescaled_action - kappa * kappa * action).abs(),
        max_perturbation: max_pert,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Largest `|q'' + q/|q|^3 + eps grad U|` outside collision windows.
    pub max_residual: f64,
    /// Physical closure `|q(1) - q(0)| + |p(1) - p(0)|` over one period of `t`.
    pub closure: f64,
    pub max_q: f64,
    pub min_q: f64,
    pub skipped: usize,
    pub samples: usize,
}

/// Substitutes the pushed-forward physical curve into the forced Kepler ODE.
/// Samples with `|q|` below `window` are skipped.
pub fn physical_validity(orbit: &PeriodicOrbit, forcing: &ForcingSpec, window: f64, tol: &Tolerances) -> Result<ValidityReport> {
    let f = forcing.with_epsilon(orbit.epsilon);
    match orbit.regularization {
        RegularizationKind::LeviCivita => validity_with(&LcSystem::new(&f)?, orbit, &f, window, tol, |_, _, _, _| 0.0),
        RegularizationKind::Moser => validity_with(&MoserSystem::new(&f), orbit, &f, window, tol, |_, _, _, _| 0.0),
    }
}

fn validity_with<Sys: ShootingSystem>(
    sys: &Sys,
    orbit: &PeriodicOrbit,
    f: &ForcingSpec,
    window: f64,
    tol: &Tolerances,
    extra: impl Fn(&[f64], &[f64], &[f64], f64) -> f64,
) -> Result<ValidityReport> {
    let flow = HamiltonianFlow::new(sys, false);
    let (samples, _) = integrate_sampled(&flow, 0.0, &orbit.state, orbit.period, orbit.period / 512.0, tol)?;
    let mut rep = ValidityReport { max_residual: 0.0, closure: 0.0, max_q: 0.0, min_q: f64::INFINITY, skipped: 0, samples: samples.len() };
    for (_, y) in &samples {
        let q = sys.physical_q(y);
        let r = norm(&q);
        rep.max_q = rep.max_q.max(r);
        rep.min_q = rep.min_q.min(r);
        if r < window {
            rep.skipped += 1;
            continue;
        }
        let t = sys.physical_t(y);
        let (v, a) = physical_velocity_acceleration(sys, y)?;
        let g = if f.is_zero() { vec![0.0; q.len()] } else { f.grad_q(&q, t) };
        let res: Vec<f64> = (0..q.len()).map(|i| a[i] + q[i] / (r * r * r) + f.epsilon * g[i]).collect();
        rep.max_residual = rep.max_residual.max(norm(&res)).max(extra(&q, &v, &a, t));
    }
    let x0 = &orbit.state;
    let x1 = &samples.last().expect("samples").1;
    let (q0, q1) = (sys.physical_q(x0), sys.physical_q(x1));
    let (p0, p1) = (sys.physical_p(x0)?, sys.physical_p(x1)?);
    rep.closure = norm(&(0..q0.len()).map(|i| q1[i] - q0[i]).collect::<Vec<_>>())
        + norm(&(0..p0.len()).map(|i| p1[i] - p0[i]).collect::<Vec<_>>());
    Ok(rep)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RtbpValidation {
    /// Largest inertial-frame residual of the full three-body ODE.
    pub max_residual: f64,
    /// Inertial position and velocity closure after one period of `t`.
    pub closure: f64,
    pub max_distance: f64,
    pub skipped: usize,
}

/// Shifts an RTBP orbit to the inertial frame and substitutes it into the
/// restricted three-body equations.
pub fn rtbp_validation(orbit: &PeriodicOrbit, forcing: &ForcingSpec, rtbp: &RtbpForcing, window: f64, tol: &Tolerances) -> Result<RtbpValidation> {
    let f = forcing.with_epsilon(orbit.epsilon);
    let inertial = |q: &[f64], _v: &[f64], a: &[f64], t: f64| -> f64 {
        let (xc, _, _, _) = primary_positions(rtbp, t);
        let (_, _, acc_rel) = rtbp.relative(t);
        let wc = rtbp.mu / (1.0 + rtbp.mu);
        let pos: Vec<f64> = (0..q.len()).map(|i| q[i] + xc[i]).collect();
        let want = inertial_acceleration(rtbp, &pos, t);
        norm(&(0..q.len()).map(|i| a[i] - wc * acc_rel[i] - want[i]).collect::<Vec<_>>())
    };
    let rep = match orbit.regularization {
        RegularizationKind::LeviCivita => validity_with(&LcSystem::new(&f)?, orbit, &f, window, tol, inertial)?,
        RegularizationKind::Moser => validity_with(&MoserSystem::new(&f), orbit, &f, window, tol, inertial)?,
    };
    // The centered primary's motion has period one, so inertial closure equals relative closure.
    Ok(RtbpValidation { max_residual: rep.max_residual, closure: rep.closure, max_distance: rep.max_q, skipped: rep.skipped })
}
