use std::f64::consts::PI;

use liouville::flows::{
    commutation_report, conservation_drift, detect_period_lattice, isotropy_check, joint_action,
    order_permutation_residual, return_residual, BracketClass, FlowParams, IntegrableSystemSpec, LatticeSearch,
};
use liouville::geometry::{ChartDomain, ScalarField, SymplecticStructure};
use liouville::systems::{self, lookup};
use proptest::prelude::*;

fn params() -> FlowParams {
    FlowParams::default()
}

#[test]
fn uncoupled_rotations_by_pi() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    // Both blocks start at (q, p) = (1, 0); z = (q1, q2, p1, p2).
    let t = [PI, PI / 2f64.sqrt()];
    let z = joint_action(&sys.spec, &t, &[1.0, 1.0, 0.0, 0.0], &params()).unwrap();
    for (a, b) in z.iter().zip([-1.0, -1.0, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-9, "{z}");
    }
}

#[test]
fn oscillator_lattice_is_two_pi() {
    let sys = lookup("harmonic_oscillator").unwrap();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &params(), &LatticeSearch::default()).unwrap();
    assert_eq!(topo.m, 1);
    assert!((topo.lattice_basis[0][0] - 2.0 * PI).abs() < 1e-8);
    assert!(topo.residuals[0] < 1e-8);
}

#[test]
fn free_translation_never_returns() {
    let sys = lookup("free_translation").unwrap();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &params(), &LatticeSearch::with_horizon(40.0)).unwrap();
    assert_eq!(topo.m, 0);
    assert!(topo.search_exhausted);
}

#[test]
fn uncoupled_lattice_is_rectangular() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &params(), &LatticeSearch::default()).unwrap();
    assert_eq!(topo.m, 2);
    let expected = [[2.0 * PI, 0.0], [0.0, 2.0 * PI / 2f64.sqrt()]];
    let mut basis: Vec<Vec<f64>> = topo.lattice_basis.iter().map(|b| b.as_slice().to_vec()).collect();
    basis.sort_by(|a, b| b[0].abs().total_cmp(&a[0].abs()));
    for (b, e) in basis.iter().zip(expected) {
        assert!((b[0] - e[0]).abs() < 1e-6 && (b[1] - e[1]).abs() < 1e-6, "{b:?}");
    }
}

#[test]
fn lattice_combinations_also_return() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &params(), &LatticeSearch::default()).unwrap();
    for (a, b) in [(1.0, 1.0), (-2.0, 3.0), (3.0, -3.0)] {
        let t = &topo.lattice_basis[0] * a + &topo.lattice_basis[1] * b;
        let r = return_residual(&sys.spec, &sys.sample_point, t.as_slice(), &params()).unwrap();
        assert!(r <= 10.0 * 1e-8, "({a}, {b}): {r}");
    }
}

#[test]
fn pendulum_rotation_period() {
    let sys = lookup("pendulum").unwrap();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &params(), &LatticeSearch::default()).unwrap();
    assert_eq!(topo.m, 1);
    let expected = systems::pendulum_rotation_period(3.5);
    assert!((topo.lattice_basis[0][0] - expected).abs() < 1e-6);
}

#[test]
fn conservation_along_catalog_flows() {
    for sys in systems::catalog() {
        for j in 0..sys.spec.n() {
            let drift = conservation_drift(&sys.spec, j, &sys.sample_point, 20.0, 40, &params())
                .unwrap_or_else(|e| panic!("{} axis {j}: {e}", sys.id));
            assert!(drift <= 1e-8, "{} axis {j}: {drift}", sys.id);
        }
    }
}

#[test]
fn oscillator_orbit_is_isotropic() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let times: Vec<Vec<f64>> = (0..100).map(|i| vec![0.0628 * i as f64, 0.031 * i as f64]).collect();
    let r = isotropy_check(&sys.spec, &sys.sample_point, &times, &params()).unwrap();
    assert!(r <= 1e-10, "{r}");
}

#[test]
fn broken_pair_is_not_isotropic() {
    let omega = SymplecticStructure::standard(ChartDomain::cube(2, 5.0));
    let hs = vec![ScalarField::parse("q1", 2).unwrap(), ScalarField::parse("p1", 2).unwrap()];
    let spec = IntegrableSystemSpec::new(omega, hs).unwrap();
    let r = isotropy_check(&spec, &[0.1, 0.2, 0.3, 0.4], &[vec![0.0, 0.0], vec![0.2, 0.1]], &params()).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let report = commutation_report(&spec, &spec.chart().grid(3));
    assert_eq!(report.pairs[0].class, BracketClass::ConstantCocycle(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn joint_flow_order_does_not_matter(t1 in -1.0..1.0f64, t2 in -1.0..1.0f64, q in -1.0..1.0f64, p in -1.0..1.0f64) {
        let sys = lookup("uncoupled_oscillators").unwrap();
        let r = order_permutation_residual(&sys.spec, &[t1, t2], &[q, p, 0.5, -0.5], &params()).unwrap();
        prop_assert!(r <= 1e-7);
    }

    #[test]
    fn flows_conserve_energy(q in -2.0..2.0f64, p in -2.0..2.0f64, t in 0.0..20.0f64) {
        let sys = lookup("nonstandard_form_2d").unwrap();
        // Levels of H stay inside the box when q² + p² ≤ 4.
        prop_assume!(q * q + p * p <= 3.9);
        let drift = conservation_drift(&sys.spec, 0, &[q, p], t, 10, &params()).unwrap();
        prop_assert!(drift <= 1e-8);
    }
}
