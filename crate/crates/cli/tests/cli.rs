use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fkepler(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fkepler")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn action_table_single_row() {
    let dir = TempDir::new().unwrap();
    let o = fkepler(dir.path(), &["action-table", "--n-max", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["n,L_n,tau_n,S_n,A0_n", lines[1]]);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn action_table_zero_is_config_error() {
    let dir = TempDir::new().unwrap();
    let o = fkepler(dir.path(), &["action-table", "--n-max", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_max"));
}

#[test]
fn unknown_forcing_kind_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"forcing": {"kind": "quadrupole"}, "n": 2}"#);
    let o = fkepler(dir.path(), &["--config", &cfg, "find-orbit"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("forcing") && msg.contains("quadrupole"), "{msg}");
}

#[test]
fn bad_flags_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    assert_eq!(fkepler(dir.path(), &["sweep", "--bogus"]).status.code(), Some(2));
    assert_eq!(fkepler(dir.path(), &["--format", "png", "action-table"]).status.code(), Some(2));
    let missing = fkepler(dir.path(), &["--config", "nope.json", "sweep"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_requires_range() {
    let dir = TempDir::new().unwrap();
    let o = fkepler(dir.path(), &["sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_range"));
}

#[test]
fn find_orbit_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"forcing": {"kind": "rotating-linear", "eps0": 1e-3}, "n": 3}"#);
    let o = fkepler(dir.path(), &["--config", &cfg, "--out", "res", "--format", "csv,json,svg", "find-orbit"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let res = dir.path().join("res");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(res.join("orbit_n3.json")).unwrap()).unwrap();
    assert_eq!(v["n"], 3);
    assert!(v["residual"].as_f64().unwrap() < 1e-10);
    assert!(res.join("trajectory_n3.csv").exists());
    assert!(fs::read_to_string(res.join("orbit_n3.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn unreachable_orbit_exits_three() {
    let dir = TempDir::new().unwrap();
    // n = 1 lies outside the domain of the primary's forcing.
    let cfg = write_config(dir.path(), r#"{"rtbp": {"m1": 1, "m2": 1e-3, "e": 0}, "n_range": [1, 1]}"#);
    let o = fkepler(dir.path(), &["--config", &cfg, "rtbp"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"forcing": {"kind": "rotating-linear", "eps0": 1e-3}, "n_range": [2, 5]}"#);
    let a = fkepler(dir.path(), &["--config", &cfg, "--out", "a", "--jobs", "1", "sweep"]);
    let b = fkepler(dir.path(), &["--config", &cfg, "--out", "b", "--jobs", "4", "sweep"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    for name in ["family.csv", "summary.json", "orbit_n2.json", "trajectory_n5.csv"] {
        let x = fs::read(dir.path().join("a").join(name)).unwrap();
        let y = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let family = fs::read_to_string(dir.path().join("a/family.csv")).unwrap();
    assert_eq!(family.lines().count(), 5);
}

#[test]
fn integrate_records_collision() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"integrate": {"system": "levi-civita", "initial": {"q": [1, 0], "p": [0, 0]}, "duration": 1.5}}"#,
    );
    let o = fkepler(dir.path(), &["--config", &cfg, "--out", "int", "integrate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("int/crossings.json")).unwrap()).unwrap();
    assert_eq!(c.as_array().unwrap().len(), 1);
    assert!((c[0]["limits"]["energy_limit"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    let traj = fs::read_to_string(dir.path().join("int/trajectory.csv")).unwrap();
    assert!(traj.starts_with("s,t,tau,q1,q2,p1,p2,energy\n"));
}

#[test]
fn integrate_needs_one_initial_condition() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"integrate": {"system": "cartesian"}}"#);
    let o = fkepler(dir.path(), &["--config", &cfg, "integrate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("integrate"));
}

#[test]
fn charts_agree_on_endpoint() {
    let dir = TempDir::new().unwrap();
    let mut gaps = Vec::new();
    for sys in ["cartesian", "levi-civita", "moser"] {
        let body = format!(
            r#"{{"forcing": {{"kind": "rotating-linear", "eps0": 1e-3}}, "formats": ["json"],
                "integrate": {{"system": "{sys}", "elements": {{"a": 1, "e": 0.5, "g": 0, "l": 0}}, "duration": 2.5}}}}"#
        );
        let cfg = write_config(dir.path(), &body);
        let o = fkepler(dir.path(), &["--config", &cfg, "--out", sys, "integrate"]);
        assert_eq!(o.status.code(), Some(0), "{sys}: {}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(sys).join("summary.json")).unwrap()).unwrap();
        gaps.push(v["endpoint_gap"].as_f64().unwrap());
    }
    assert!((gaps[0] - gaps[1]).abs() < 1e-8 && (gaps[1] - gaps[2]).abs() < 1e-8, "{gaps:?}");
}

#[test]
fn localization_reports_band() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"forcing": {"kind": "rotating-linear", "eps0": 1e-3}, "kappas": [0.2]}"#);
    let o = fkepler(dir.path(), &["--config", &cfg, "--out", "loc", "localization"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("kappa,S,S_dev_over_kappa2,band_ok,C1_fit,C4_fit\n"));
    assert!(out.lines().nth(1).unwrap().contains(",true,"));
}
