use forced_kepler::coords::lambda_n;
use forced_kepler::integrator::Tolerances;
use forced_kepler::kepler::{eval_energy, CartesianExtState, ForcingSpec};
use forced_kepler::levi_civita::{integrate_lc, lc_from_physical, lc_hamiltonian, Branch, LcOptions, LcStop};
use forced_kepler::moser::{integrate_moser, unit_from_physical, unit_hamiltonian};
use forced_kepler::orbit_finder::{
    continuation_in_epsilon, orbit_rabinowitz_action, physical_validity, shoot_periodic, RegularizationKind,
    ShootingProblem,
};
use proptest::prelude::*;

fn rotating(dim: usize) -> ForcingSpec {
    ForcingSpec::rotating_linear(dim, 1.0, 1e-3)
}

#[test]
fn continuation_reaches_full_forcing() {
    let p = ShootingProblem::new(RegularizationKind::LeviCivita, rotating(2), 3);
    let fam = continuation_in_epsilon(&p, &[0.0, 0.25, 0.5, 1.0]).unwrap();
    let last = fam.last().unwrap();
    assert_eq!(last.epsilon, 1.0);
    assert!(last.residual < 1e-10);
    // The action moves by O(eps0) away from the manifold value.
    let a0 = lambda_n(3).unwrap().action;
    for o in &fam {
        assert!((o.action - a0).abs() < 1e-2, "{} vs {a0}", o.action);
    }
    let direct = shoot_periodic(&p, 1.0).unwrap();
    assert!((direct.action - last.action).abs() < 1e-8);
}

#[test]
fn forced_orbit_solves_physical_equations() {
    let f = rotating(2);
    let o = shoot_periodic(&ShootingProblem::new(RegularizationKind::LeviCivita, f.clone(), 5), 1.0).unwrap();
    let v = physical_validity(&o, &f, 1e-4, &Tolerances::default()).unwrap();
    assert!(v.max_residual < 1e-7 && v.closure < 1e-8, "{v:?}");
    let rab = orbit_rabinowitz_action(&o, &f, &Tolerances::default()).unwrap();
    assert!((rab + o.action).abs() < 1e-8);
}

#[test]
fn moser_and_levi_civita_find_the_same_planar_orbit() {
    let f = rotating(2);
    let a = shoot_periodic(&ShootingProblem::new(RegularizationKind::LeviCivita, f.clone(), 4), 1.0).unwrap();
    let b = shoot_periodic(&ShootingProblem::new(RegularizationKind::Moser, f, 4), 1.0).unwrap();
    assert!((a.max_q - b.max_q).abs() < 1e-6, "{} vs {}", a.max_q, b.max_q);
}

#[test]
fn spatial_forced_orbit() {
    let o = shoot_periodic(&ShootingProblem::new(RegularizationKind::Moser, rotating(3), 3), 1.0).unwrap();
    assert!(o.residual < 1e-10);
    assert!((o.t_advance - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn levi_civita_flow_preserves_zero_level(q1 in 0.3f64..1.2, q2 in -0.5f64..0.5, p1 in -0.8f64..0.8,
                                             p2 in 0.2f64..1.2, t in 0.0f64..1.0) {
        let f = rotating(2);
        let x = CartesianExtState { q: vec![q1, q2], p: vec![p1, p2], t, tau: 0.0 };
        let x = CartesianExtState { tau: -eval_energy(&x, &f), ..x };
        prop_assume!(x.tau > 0.05);
        let s0 = lc_from_physical(&x, Branch::Plus).unwrap();
        let traj = integrate_lc(&s0, &f, LcStop::Fictitious(3.0), &LcOptions::default()).unwrap();
        for smp in &traj.samples {
            prop_assert!(lc_hamiltonian(&smp.state, &f).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn moser_flow_preserves_zero_level(q1 in 0.3f64..1.2, q2 in -0.5f64..0.5, q3 in -0.3f64..0.3,
                                       p1 in -0.8f64..0.8, p2 in 0.2f64..1.2, p3 in -0.3f64..0.3) {
        let f = rotating(3);
        let x = CartesianExtState { q: vec![q1, q2, q3], p: vec![p1, p2, p3], t: 0.0, tau: 0.0 };
        let x = CartesianExtState { tau: -eval_energy(&x, &f), ..x };
        prop_assume!(x.tau > 0.05);
        let s0 = unit_from_physical(&x).unwrap();
        let out = integrate_moser(&s0, &f, 3.0, None, None, &Tolerances::default()).unwrap();
        for smp in &out {
            prop_assert!(unit_hamiltonian(&smp.state, &f).abs() < 1e-10);
            prop_assert!(smp.state.constraint_drift() < 1e-9);
        }
    }
}
