use std::fs;
use std::io::Read as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use forced_kepler::coords::lambda_n;
use forced_kepler::flow::{physical_point, TrajectoryPoint};
use forced_kepler::integrator::Tolerances;
use forced_kepler::kepler::{eval_energy, eval_extended_energy, integrate_cartesian, kepler_solve, CartesianExtState};
use forced_kepler::levi_civita::{collision_limits, integrate_lc, lc_from_physical, Branch, CollisionLimits, LcOptions, LcStop, LcSystem};
use forced_kepler::moser::{integrate_moser, unit_from_physical, MoserSystem};
use forced_kepler::orbit_finder::{
    action_bound_check, continuation_in_epsilon, localization_check, orbit_trajectory, physical_validity,
    power_law_exponent, rtbp_validation, shoot_periodic, sweep_n, ActionBoundReport, NeighbourhoodGrid, OrbitRecord,
    PeriodicOrbit, RegularizationKind, ShootingProblem, SweepEntry, ValidityReport,
};
use forced_kepler::rtbp::{shift_to_inertial, RtbpForcing};
use forced_kepler::Error;

use crate::config::{parse_config, Format, IntegrateSystem, Resolved, RunConfig};
use crate::output::{trajectory_table, write_json, write_svg, Cell, Table};
use crate::{Cli, CliError, Command};

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        None => RunConfig::default(),
        Some(p) if p.as_os_str() == "-" => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            parse_config(&s)?
        }
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            parse_config(&s)?
        }
    };
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(f) = &cli.format {
        cfg.formats = Some(f.clone());
    }
    if let Some(t) = cli.tol {
        if !(t > 0.0) {
            return Err(CliError::Config("--tol: must be positive".into()));
        }
        let base = cfg.tolerances.unwrap_or_default();
        cfg.tolerances = Some(Tolerances { rtol: t, atol: t, ..base });
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::ActionTable { n_max } => {
            let explicit_out = cfg.out.is_some();
            let r = cfg.resolve()?;
            let table = action_table(n_max.or(cfg.n_max).unwrap_or(10))?;
            print!("{}", table.render());
            if explicit_out {
                fs::create_dir_all(&r.out)?;
                table.write(&r.out.join("action_table.csv"))?;
            }
            Ok(())
        }
        Command::Integrate => {
            let r = cfg.resolve()?;
            cmd_integrate(&cfg, &r)
        }
        Command::FindOrbit { n } => {
            if n.is_some() {
                cfg.n = n;
            }
            let r = cfg.resolve()?;
            cmd_find_orbit(&cfg, &r)
        }
        Command::Sweep => {
            let r = cfg.resolve()?;
            with_pool(r.jobs, || cmd_sweep(&cfg, &r))
        }
        Command::Rtbp => {
            if cfg.rtbp.is_none() {
                return Err(CliError::Config("rtbp: block required".into()));
            }
            let r = cfg.resolve()?;
            with_pool(r.jobs, || cmd_rtbp(&cfg, &r))
        }
        Command::Localization => {
            let r = cfg.resolve()?;
            with_pool(r.jobs, || cmd_localization(&cfg, &r))
        }
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    match jobs {
        None => f(),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn orbit_error(e: Error) -> CliError {
    match e {
        Error::ShootingFailed { .. } | Error::LeftLocalization { .. } | Error::ContinuationStuck { .. } | Error::OutsideDomain { .. } => {
            CliError::NoOrbit(e.to_string())
        }
        other => CliError::Numeric(other.to_string()),
    }
}

/// Rows `n,L_n,tau_n,S_n,A0_n` for `n = 1..=n_max`.
pub fn action_table(n_max: u32) -> Result<Table, CliError> {
    if n_max == 0 {
        return Err(CliError::Config("n_max: must be at least 1".into()));
    }
    let mut t = Table::new(&["n", "L_n", "tau_n", "S_n", "A0_n"]);
    for n in 1..=n_max {
        let d = lambda_n(n)?;
        t.push(vec![Cell::U(n as u64), Cell::F(d.l_n), Cell::F(d.tau_n), Cell::F(d.s_n), Cell::F(d.action)]);
    }
    Ok(t)
}

#[derive(Serialize)]
struct CrossingReport {
    s: f64,
    t: f64,
    limits: Option<CollisionLimits>,
    error: Option<String>,
}

#[derive(Serialize)]
struct IntegrateSummary {
    system: &'static str,
    samples: usize,
    duration: f64,
    /// `|q(end) - q(0)| + |p(end) - p(0)|`.
    endpoint_gap: f64,
    max_energy_drift: f64,
    crossings: usize,
}

fn initial_state(cfg: &RunConfig, r: &Resolved) -> Result<CartesianExtState, CliError> {
    let ic = cfg.integrate.as_ref().ok_or_else(|| CliError::Config("integrate: block required".into()))?;
    let mut x = match (&ic.initial, &ic.elements) {
        (Some(s), None) => {
            if s.q.len() != r.dimension || s.p.len() != r.dimension {
                return Err(CliError::Config(format!("integrate.initial: q and p need {} entries", r.dimension)));
            }
            CartesianExtState { q: s.q.clone(), p: s.p.clone(), t: s.t, tau: f64::NAN }
        }
        (None, Some(el)) => {
            if el.dim() != r.dimension {
                return Err(CliError::Config("integrate.elements: orientation does not match dimension".into()));
            }
            kepler_solve(el, 0.0).map_err(|e| CliError::Config(format!("integrate.elements: {e}")))?
        }
        _ => return Err(CliError::Config("integrate: give exactly one of initial, elements".into())),
    };
    if x.q.iter().all(|v| *v == 0.0) {
        return Err(CliError::Config("integrate.initial.q: collision state".into()));
    }
    x.tau = match ic.initial.as_ref().and_then(|s| s.tau) {
        Some(t) => t,
        None => -eval_energy(&x, &r.forcing),
    };
    Ok(x)
}

/// Fictitious-time budget per unit of physical time for the Moser chart.
const MOSER_S_PER_T: f64 = 1e4;

fn gap(a: &TrajectoryPoint, b: &TrajectoryPoint) -> f64 {
    let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d(&a.q, &b.q) + d(&a.p, &b.p)
}

fn cmd_integrate(cfg: &RunConfig, r: &Resolved) -> Result<(), CliError> {
    let ic = cfg.integrate.as_ref().ok_or_else(|| CliError::Config("integrate: block required".into()))?;
    if !(ic.duration > 0.0) {
        return Err(CliError::Config("integrate.duration: must be positive".into()));
    }
    if ic.stride.is_some_and(|s| !(s > 0.0)) {
        return Err(CliError::Config("integrate.stride: must be positive".into()));
    }
    let x0 = initial_state(cfg, r)?;
    let f = &r.forcing;
    let mut crossings = Vec::new();
    let (name, points) = match ic.system {
        IntegrateSystem::Cartesian => {
            let stride = ic.stride.unwrap_or(ic.duration / 1000.0);
            let states = integrate_cartesian(&x0, f, x0.t + ic.duration, stride, &r.tol)?;
            let pts = states
                .into_iter()
                .map(|x| TrajectoryPoint { s: x.t, t: x.t, tau: x.tau, energy: eval_extended_energy(&x, f), q: x.q, p: x.p })
                .collect();
            ("cartesian", pts)
        }
        IntegrateSystem::LeviCivita => {
            if r.dimension != 2 {
                return Err(CliError::Config("integrate.system: levi-civita requires dimension 2".into()));
            }
            let sys = LcSystem::new(f)?;
            let opts = LcOptions { tol: r.tol, stride: ic.stride, ..Default::default() };
            let traj = integrate_lc(&lc_from_physical(&x0, Branch::Plus)?, f, LcStop::TimeAdvance(ic.duration), &opts)?;
            for c in &traj.crossings {
                let (limits, error) = match collision_limits(c, f, &r.tol) {
                    Ok(l) => (Some(l), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                crossings.push(CrossingReport { s: c.s, t: c.state.t, limits, error });
            }
            ("levi-civita", traj.samples.iter().map(|s| physical_point(&sys, s.s, &s.state.to_vec())).collect())
        }
        IntegrateSystem::Moser => {
            let sys = MoserSystem::new(f);
            let samples = integrate_moser(&unit_from_physical(&x0)?, f, MOSER_S_PER_T * (1.0 + ic.duration), Some(ic.duration), ic.stride, &r.tol)?;
            ("moser", samples.iter().map(|s| physical_point(&sys, s.s, &s.state.to_vec())).collect::<Vec<_>>())
        }
    };
    let points: Vec<TrajectoryPoint> = points;
    let first = points.first().expect("trajectory has samples");
    let last = points.last().expect("trajectory has samples");
    let summary = IntegrateSummary {
        system: name,
        samples: points.len(),
        duration: ic.duration,
        endpoint_gap: gap(first, last),
        max_energy_drift: points.iter().map(|p| (p.energy - first.energy).abs()).fold(0.0, f64::max),
        crossings: crossings.len(),
    };
    fs::create_dir_all(&r.out)?;
    if r.wants(Format::Csv) {
        trajectory_table(&points).write(&r.out.join("trajectory.csv"))?;
    }
    if r.wants(Format::Json) {
        write_json(&r.out.join("summary.json"), &summary)?;
        if ic.system == IntegrateSystem::LeviCivita {
            write_json(&r.out.join("crossings.json"), &crossings)?;
        }
    }
    if r.wants(Format::Svg) {
        write_svg(&r.out.join("trajectory.svg"), &points, name)?;
    }
    Ok(())
}

fn problem(r: &Resolved, n: u32) -> ShootingProblem {
    ShootingProblem { regularization: r.regularization, forcing: r.forcing.clone(), n, newton: r.newton.clone() }
}

#[derive(Serialize)]
struct OrbitFile {
    #[serde(flatten)]
    record: OrbitRecord,
    validity: Option<ValidityReport>,
    action_bound: Option<ActionBoundReport>,
}

fn orbit_file(orbit: &PeriodicOrbit, r: &Resolved) -> OrbitFile {
    OrbitFile {
        record: orbit.record(),
        validity: physical_validity(orbit, &r.forcing, r.collision_window, &r.tol).ok(),
        action_bound: if orbit.regularization == RegularizationKind::LeviCivita {
            action_bound_check(orbit, &r.forcing, &NeighbourhoodGrid::default()).ok()
        } else {
            None
        },
    }
}

fn write_orbit(dir: &Path, orbit: &PeriodicOrbit, r: &Resolved) -> Result<(), CliError> {
    let n = orbit.n;
    if r.wants(Format::Json) {
        write_json(&dir.join(format!("orbit_n{n}.json")), &orbit_file(orbit, r))?;
    }
    if r.wants(Format::Csv) || r.wants(Format::Svg) {
        let pts = orbit_trajectory(orbit, &r.forcing, 1000, &r.tol)?;
        if r.wants(Format::Csv) {
            trajectory_table(&pts).write(&dir.join(format!("trajectory_n{n}.csv")))?;
        }
        if r.wants(Format::Svg) {
            write_svg(&dir.join(format!("orbit_n{n}.svg")), &pts, &format!("n = {n}"))?;
        }
    }
    Ok(())
}

fn cmd_find_orbit(cfg: &RunConfig, r: &Resolved) -> Result<(), CliError> {
    let n = cfg.n.unwrap_or(1);
    let p = problem(r, n);
    let orbit = match &cfg.epsilon_schedule {
        Some(s) => continuation_in_epsilon(&p, s).map_err(orbit_error)?.pop().expect("nonempty family"),
        None => shoot_periodic(&p, r.epsilon).map_err(orbit_error)?,
    };
    fs::create_dir_all(&r.out)?;
    write_orbit(&r.out, &orbit, r)
}

#[derive(Serialize)]
struct Failure {
    n: u32,
    error: String,
}

#[derive(Serialize)]
struct FamilySummary {
    found: usize,
    failed: Vec<Failure>,
    /// Fitted exponent `b` of `max_q ~ n^b`.
    fit_exponent: Option<f64>,
    actions_strictly_increasing: bool,
    min_action_gap: Option<f64>,
}

fn n_list(cfg: &RunConfig, default: [u32; 2]) -> Vec<u32> {
    let [a, b] = cfg.n_range.unwrap_or(default);
    (a..=b).collect()
}

fn family_outputs(entries: &[SweepEntry], r: &Resolved) -> Result<FamilySummary, CliError> {
    fs::create_dir_all(&r.out)?;
    let orbits: Vec<&PeriodicOrbit> = entries.iter().filter_map(|e| e.orbit.as_ref()).collect();
    let mut t = Table::new(&["n", "kappa", "S", "action", "max_q", "residual"]);
    for o in &orbits {
        t.push(vec![Cell::U(o.n as u64), Cell::F(o.kappa), Cell::F(o.period), Cell::F(o.action), Cell::F(o.max_q), Cell::F(o.residual)]);
    }
    if r.wants(Format::Csv) {
        t.write(&r.out.join("family.csv"))?;
    }
    orbits.par_iter().map(|o| write_orbit(&r.out, o, r)).collect::<Result<Vec<()>, CliError>>()?;
    let ns: Vec<f64> = orbits.iter().map(|o| o.n as f64).collect();
    let qs: Vec<f64> = orbits.iter().map(|o| o.max_q).collect();
    let gaps: Vec<f64> = orbits.windows(2).map(|w| w[1].action - w[0].action).collect();
    Ok(FamilySummary {
        found: orbits.len(),
        failed: entries
            .iter()
            .filter(|e| e.orbit.is_none())
            .map(|e| Failure { n: e.n, error: e.error.clone().unwrap_or_default() })
            .collect(),
        fit_exponent: power_law_exponent(&ns, &qs),
        actions_strictly_increasing: gaps.iter().all(|g| *g > 0.0),
        min_action_gap: gaps.iter().copied().reduce(f64::min),
    })
}

fn cmd_sweep(cfg: &RunConfig, r: &Resolved) -> Result<(), CliError> {
    if cfg.n_range.is_none() {
        return Err(CliError::Config("n_range: required for sweep".into()));
    }
    let entries = sweep_n(&problem(r, 1), &n_list(cfg, [1, 1]));
    let summary = family_outputs(&entries, r)?;
    if r.wants(Format::Json) {
        write_json(&r.out.join("summary.json"), &summary)?;
    }
    report_family(&summary)
}

fn report_family(summary: &FamilySummary) -> Result<(), CliError> {
    for f in &summary.failed {
        eprintln!("fkepler: n = {}: {}", f.n, f.error);
    }
    if summary.found == 0 {
        return Err(CliError::NoOrbit("every n failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct RtbpSummary {
    #[serde(flatten)]
    family: FamilySummary,
    max_residual: Option<f64>,
    max_closure: Option<f64>,
    distance_decreasing: bool,
}

fn cmd_rtbp(cfg: &RunConfig, r: &Resolved) -> Result<(), CliError> {
    let po = cfg.rtbp.as_ref().expect("checked by caller");
    let rf = RtbpForcing::new(po)?;
    let entries = sweep_n(&problem(r, 1), &n_list(cfg, [3, 8]));
    let family = family_outputs(&entries, r)?;
    let orbits: Vec<&PeriodicOrbit> = entries.iter().filter_map(|e| e.orbit.as_ref()).collect();
    let checks: Vec<_> = orbits
        .par_iter()
        .map(|o| rtbp_validation(o, &r.forcing, &rf, r.collision_window, &r.tol))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut t = Table::new(&["n", "max_residual", "closure", "max_distance"]);
    for (o, v) in orbits.iter().zip(&checks) {
        t.push(vec![Cell::U(o.n as u64), Cell::F(v.max_residual), Cell::F(v.closure), Cell::F(v.max_distance)]);
    }
    if r.wants(Format::Csv) {
        t.write(&r.out.join("validation.csv"))?;
        for o in &orbits {
            let pts = orbit_trajectory(o, &r.forcing, 1000, &r.tol)?;
            let d = r.dimension;
            let mut header = vec!["t".to_string()];
            header.extend((1..=d).map(|i| format!("q{i}")));
            let mut it = Table::new(&header);
            for p in &pts {
                let (q, _) = shift_to_inertial(&rf, &CartesianExtState { q: p.q.clone(), p: p.p.clone(), t: p.t, tau: p.tau });
                let mut row = vec![Cell::F(p.t)];
                row.extend(q.iter().map(|v| Cell::F(*v)));
                it.push(row);
            }
            it.write(&r.out.join(format!("inertial_n{}.csv", o.n)))?;
        }
    }
    let summary = RtbpSummary {
        family,
        max_residual: checks.iter().map(|c| c.max_residual).reduce(f64::max),
        max_closure: checks.iter().map(|c| c.closure).reduce(f64::max),
        distance_decreasing: checks.windows(2).all(|w| w[1].max_distance < w[0].max_distance),
    };
    if r.wants(Format::Json) {
        write_json(&r.out.join("summary.json"), &summary)?;
    }
    report_family(&summary.family)
}

#[derive(Serialize)]
struct LocalizationRow {
    kappa: f64,
    band_ok: bool,
    report: Option<forced_kepler::orbit_finder::LocalizationReport>,
    error: Option<String>,
}

fn cmd_localization(cfg: &RunConfig, r: &Resolved) -> Result<(), CliError> {
    if r.regularization != RegularizationKind::LeviCivita {
        return Err(CliError::Config("localization: requires the levi-civita regularization (dimension 2)".into()));
    }
    let kappas = cfg.kappas.clone().unwrap_or_else(|| vec![0.2, 0.1, 0.05]);
    if kappas.is_empty() || kappas.iter().any(|k| !(*k > 0.0 && *k < 1.0)) {
        return Err(CliError::Config("kappas: need values in (0, 1)".into()));
    }
    let rows: Vec<LocalizationRow> = kappas
        .par_iter()
        .map(|&k| match localization_check(&r.forcing, k, &r.tol) {
            Ok(rep) => Ok(LocalizationRow { kappa: k, band_ok: rep.in_band, report: Some(rep), error: None }),
            Err(e @ Error::LeftLocalization { .. }) => Ok(LocalizationRow { kappa: k, band_ok: false, report: None, error: Some(e.to_string()) }),
            Err(e) => Err(CliError::from(e)),
        })
        .collect::<Result<_, _>>()?;
    let mut t = Table::new(&["kappa", "S", "S_dev_over_kappa2", "band_ok", "C1_fit", "C4_fit"]);
    for row in &rows {
        let (s, dev, c1, c4) = row.report.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |rep| (rep.s_period, rep.c6, rep.c1, rep.c4));
        t.push(vec![Cell::F(row.kappa), Cell::F(s), Cell::F(dev), Cell::B(row.band_ok), Cell::F(c1), Cell::F(c4)]);
    }
    fs::create_dir_all(&r.out)?;
    if r.wants(Format::Csv) {
        t.write(&r.out.join("localization.csv"))?;
    }
    if r.wants(Format::Json) {
        write_json(&r.out.join("localization.json"), &rows)?;
    }
    print!("{}", t.render());
    let smallest = rows.iter().min_by(|a, b| a.kappa.total_cmp(&b.kappa)).expect("nonempty");
    if !smallest.band_ok {
        return Err(CliError::NoOrbit(format!("band violation at the smallest kappa {}", smallest.kappa)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_table_single_row() {
        let t = action_table(1).unwrap();
        assert_eq!(t.len(), 1);
        let row = t.render().lines().nth(1).unwrap().to_string();
        let vals: Vec<f64> = row.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        let pi = std::f64::consts::PI;
        assert!((vals[0] - 2f64.powf(2.0 / 3.0) * pi.powf(-1.0 / 3.0)).abs() < 1e-15);
        assert!((vals[3] - 3.0 * 2f64.powf(-1.0 / 3.0) * pi.powf(2.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn action_table_rejects_zero() {
        assert!(matches!(action_table(0), Err(CliError::Config(_))));
    }

    #[test]
    fn action_column_is_monotone() {
        let t = action_table(1000).unwrap();
        let a: Vec<f64> = t.render().lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] > w[0]));
    }
}
