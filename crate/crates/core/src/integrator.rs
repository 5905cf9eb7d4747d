//! Adaptive Runge-Kutta 9(8) integrator with 9th-order dense output.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator_tableau as tab;

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, s: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
    /// Number of leading components that take part in step-size control.
    fn error_dim(&self) -> usize {
        self.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rtol: 1e-12, atol: 1e-13, h_max: f64::INFINITY, max_steps: 2_000_000 }
    }
}

impl Tolerances {
    pub fn with_rtol(rtol: f64) -> Self {
        Tolerances { rtol, atol: rtol * 0.1, ..Default::default() }
    }
}

/// One accepted step, with lazily evaluated dense output.
pub struct StepData<'a, S: OdeSystem + ?Sized> {
    sys: &'a S,
    pub s0: f64,
    pub h: f64,
    pub y0: &'a [f64],
    pub y1: &'a [f64],
    k: &'a [Vec<f64>],
    extra: OnceCell<std::result::Result<Vec<Vec<f64>>, Error>>,
}

impl<S: OdeSystem + ?Sized> StepData<'_, S> {
    pub fn s1(&self) -> f64 {
        self.s0 + self.h
    }

    fn extra_stages(&self) -> Result<&Vec<Vec<f64>>> {
        self.extra
            .get_or_init(|| {
                let n = self.y0.len();
                let mut ks: Vec<Vec<f64>> = Vec::with_capacity(tab::EXTRA_STAGES);
                let mut y = vec![0.0; n];
                for i in 0..tab::EXTRA_STAGES {
                    y.copy_from_slice(self.y0);
                    for (j, &a) in tab::A_DENSE[i].iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let kj = if j < tab::STAGES { &self.k[j] } else { &ks[j - tab::STAGES] };
                        for (yc, kc) in y.iter_mut().zip(kj) {
                            *yc += self.h * a * kc;
                        }
                    }
                    let mut k = vec![0.0; n];
                    self.sys.rhs(self.s0 + tab::C_DENSE[i] * self.h, &y, &mut k)?;
                    ks.push(k);
                }
                Ok(ks)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Dense output at `s` inside the step.
    pub fn eval(&self, s: f64) -> Result<Vec<f64>> {
        if s == self.s1() {
            return Ok(self.y1.to_vec());
        }
        if s == self.s0 {
            return Ok(self.y0.to_vec());
        }
        let extra = self.extra_stages()?;
        let theta = (s - self.s0) / self.h;
        let mut y = self.y0.to_vec();
        for i in 0..tab::STAGES + tab::EXTRA_STAGES {
            let row = &tab::B_DENSE[i];
            let mut c = row[tab::DENSE_ORDER - 1];
            for j in (0..tab::DENSE_ORDER - 1).rev() {
                c = c * theta + row[j];
            }
            c *= theta * self.h;
            if c == 0.0 {
                continue;
            }
            let k = if i < tab::STAGES { &self.k[i] } else { &extra[i - tab::STAGES] };
            for (yc, kc) in y.iter_mut().zip(k) {
                *yc += c * kc;
            }
        }
        Ok(y)
    }

    pub fn system(&self) -> &S {
        self.sys
    }
}

pub enum StepAction {
    Continue,
    /// Terminate at the given abscissa inside the current step.
    Stop(f64),
    /// Continue from a modified state (e.g. after a projection).
    Replace(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub s: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

fn error_ratio(y0: &[f64], hi: &[f64], lo: &[f64], m: usize, tol: &Tolerances) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..m {
        let sc = tol.atol + tol.rtol * y0[i].abs().max(hi[i].abs());
        err = err.max((hi[i] - lo[i]).abs() / sc);
    }
    err
}

/// Integrates from `s0` to `s_end`, calling `on_step` after every accepted step.
pub fn integrate<S, F>(
    sys: &S,
    s0: f64,
    y0: &[f64],
    s_end: f64,
    tol: &Tolerances,
    mut on_step: F,
) -> Result<Outcome>
where
    S: OdeSystem + ?Sized,
    F: FnMut(&StepData<S>) -> Result<StepAction>,
{
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::InvalidInput(format!("state has {} components, expected {n}", y0.len())));
    }
    let dir = if s_end >= s0 { 1.0 } else { -1.0 };
    let span = (s_end - s0).abs();
    let m = sys.error_dim();
    let mut s = s0;
    let mut y = y0.to_vec();
    if span == 0.0 {
        return Ok(Outcome { s, y, accepted: 0, rejected: 0 });
    }
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; tab::STAGES];
    sys.rhs(s, &y, &mut k[0])?;

    let f_norm = k[0][..m].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let y_norm = y[..m].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut h = if f_norm > 0.0 { 0.05 * (y_norm.max(1e-3) / f_norm) } else { 1e-3 };
    h = h.min(span).min(tol.h_max).max(span * 1e-12);

    let mut stage = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut lo = vec![0.0; n];
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let h_floor = 1e-14 * span.max(1.0);

    loop {
        let remaining = (s_end - s).abs();
        if remaining <= 1e-15 * span.max(1.0) {
            return Ok(Outcome { s, y, accepted, rejected });
        }
        if accepted + rejected > tol.max_steps {
            return Err(Error::Integration(format!("step budget exhausted at s = {s}")));
        }
        let last = h >= remaining;
        let hs = if last { remaining } else { h } * dir;

        let mut stage_err: Option<Error> = None;
        for i in 1..tab::STAGES {
            stage.copy_from_slice(&y);
            for j in 0..i {
                let a = tab::A[i][j];
                if a != 0.0 {
                    for (sc, kc) in stage.iter_mut().zip(&k[j]) {
                        *sc += hs * a * kc;
                    }
                }
            }
            if let Err(e) = sys.rhs(s + tab::C[i] * hs, &stage, &mut k[i]) {
                stage_err = Some(e);
                break;
            }
        }
        if let Some(e) = stage_err {
            if h.abs() * 0.25 < h_floor {
                return Err(e);
            }
            h *= 0.25;
            rejected += 1;
            continue;
        }

        hi.copy_from_slice(&y);
        lo.copy_from_slice(&y);
        for j in 0..tab::STAGES {
            let (bh, bl) = (tab::B_HIGH[j], tab::B_LOW[j]);
            for c in 0..n {
                hi[c] += hs * bh * k[j][c];
                lo[c] += hs * bl * k[j][c];
            }
        }
        let err = error_ratio(&y, &hi, &lo, m, tol);
        if !err.is_finite() {
            if h * 0.25 < h_floor {
                return Err(Error::Integration(format!("non-finite state near s = {s}")));
            }
            h *= 0.25;
            rejected += 1;
            continue;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / 9.0)).clamp(0.2, 5.0) };
        if err > 1.0 {
            if h * factor < h_floor {
                return Err(Error::Integration(format!("step size underflow at s = {s}")));
            }
            h *= factor;
            rejected += 1;
            continue;
        }

        let s_new = if last { s_end } else { s + hs };
        let action = {
            let data = StepData { sys, s0: s, h: s_new - s, y0: &y, y1: &hi, k: &k, extra: OnceCell::new() };
            on_step(&data)?
        };
        accepted += 1;
        match action {
            StepAction::Continue => {
                y.copy_from_slice(&hi);
            }
            StepAction::Replace(new_y) => {
                y = new_y;
            }
            StepAction::Stop(at) => {
                let data = StepData { sys, s0: s, h: s_new - s, y0: &y, y1: &hi, k: &k, extra: OnceCell::new() };
                let y_stop = data.eval(at)?;
                return Ok(Outcome { s: at, y: y_stop, accepted, rejected });
            }
        }
        s = s_new;
        if last {
            return Ok(Outcome { s, y, accepted, rejected });
        }
        let mut k0 = std::mem::take(&mut k[0]);
        sys.rhs(s, &y, &mut k0)?;
        k[0] = k0;
        h = (h * factor).min(tol.h_max);
    }
}

/// Locates a sign change of `g` inside an accepted step using the dense output.
///
/// Returns the root abscissa and the interpolated state there, or `None` when
/// `g` does not change sign across the step.
pub fn locate_root<S, G>(step: &StepData<S>, g: G, tol_s: f64) -> Result<Option<(f64, Vec<f64>)>>
where
    S: OdeSystem + ?Sized,
    G: Fn(f64, &[f64]) -> f64,
{
    let (mut a, mut b) = (step.s0, step.s1());
    let mut ga = g(a, step.y0);
    let mut gb = g(b, step.y1);
    if ga == 0.0 {
        return Ok(Some((a, step.y0.to_vec())));
    }
    if ga * gb > 0.0 {
        return Ok(None);
    }
    // Illinois false position with bisection fallback.
    let mut side = 0i32;
    for iter in 0..200 {
        if (b - a).abs() <= tol_s {
            break;
        }
        let mut c = (a * gb - b * ga) / (gb - ga);
        if !(c > a.min(b) && c < a.max(b)) || iter % 8 == 7 {
            c = 0.5 * (a + b);
        }
        let yc = step.eval(c)?;
        let gc = g(c, &yc);
        if gc == 0.0 {
            return Ok(Some((c, yc)));
        }
        if gc * gb < 0.0 {
            a = b;
            ga = gb;
            b = c;
            gb = gc;
            side = 0;
        } else {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    let root = if ga.abs() < gb.abs() { a } else { b };
    let yr = step.eval(root)?;
    Ok(Some((root, yr)))
}

/// Integrates and records the state at `s0 + k * stride` for all grid points
/// up to `s_end`, returning the samples and the final outcome.
pub fn integrate_sampled<S: OdeSystem + ?Sized>(
    sys: &S,
    s0: f64,
    y0: &[f64],
    s_end: f64,
    stride: f64,
    tol: &Tolerances,
) -> Result<(Vec<(f64, Vec<f64>)>, Outcome)> {
    let mut samples = vec![(s0, y0.to_vec())];
    let mut next = 1usize;
    let out = integrate(sys, s0, y0, s_end, tol, |st| {
        loop {
            let sk = s0 + next as f64 * stride;
            if sk > st.s1() + 1e-15 * stride || sk > s_end + 1e-12 * stride {
                break;
            }
            samples.push((sk, st.eval(sk.min(st.s1()))?));
            next += 1;
        }
        Ok(StepAction::Continue)
    })?;
    Ok((samples, out))
}
