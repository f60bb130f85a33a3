mod common;

use std::sync::Arc;

use common::{random_polynomial, random_times, SkewedSection};
use liouville::expr::Expression;
use liouville::flows::FlowParams;
use liouville::foliation::{
    build_section, canonical_coordinates, corrected_obstruction, darboux_residual, homotopy_primitive,
    lagrangianize_section, pilot_steps, AdaptedChart, BaseBox, CanonicalParams, HomotopyPrimitive, Section,
};
use liouville::geometry::{tensor_grid, TwoForm};
use liouville::systems::lookup;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn uncoupled_section_is_blockwise() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let s = build_section(&sys.spec, &sys.sample_point).unwrap();
    let r2 = 2f64.sqrt();
    for (h1, h2) in [(0.5, r2 / 2.0), (0.47, 0.74), (0.53, 0.66)] {
        let z = s.point(&[h1, h2]).unwrap();
        // H2 = √2 (q2² + p2²)/2 on the ray p2 = 0.
        let expected = [(2.0 * h1).sqrt(), (2.0 * h2 / r2).sqrt(), 0.0, 0.0];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-10, "{z}");
        }
    }
}

#[test]
fn oscillator_chart() {
    let sys = lookup("harmonic_oscillator").unwrap();
    let chart = canonical_coordinates(&sys.spec, &sys.sample_point, &CanonicalParams::default()).unwrap();
    assert!(chart.shift().is_zero());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = chart.sample_coordinates(&mut rng, 200, 0.9);
    let times = random_times(&mut rng, 200, 1, 0.4);
    let r = chart.residuals(&samples, &times, &FlowParams::default()).unwrap();
    assert!(r.delta <= 1e-6 && r.darboux <= 1e-8 && r.linear <= 1e-6, "{r:?}");
    // θ is the flow time from the ray (√(2H), 0).
    let h: f64 = 0.52;
    let z = [(2.0 * h).sqrt() * 0.3f64.cos(), (2.0 * h).sqrt() * 0.3f64.sin()];
    let x = chart.coordinates(&z).unwrap();
    assert!((x[0] - h).abs() < 1e-14 && (x[1] - 0.3).abs() < 1e-10, "{x}");
}

#[test]
fn translation_chart_is_canonical() {
    let sys = lookup("free_translation").unwrap();
    let chart = canonical_coordinates(&sys.spec, &sys.sample_point, &CanonicalParams::default()).unwrap();
    // With q̇ = −1 the angle is θ = −q and (f, θ) = (p, −q).
    let x = chart.coordinates(&[0.4, 1.05]).unwrap();
    assert!((x[0] - 1.05).abs() < 1e-14 && (x[1] + 0.4).abs() < 1e-12, "{x}");
    let grid = tensor_grid(&[0.95, -0.5], &[1.05, 0.5], 4);
    assert!(darboux_residual(&chart, &grid).unwrap() <= 1e-9);
}

#[test]
fn uncoupled_chart() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let chart = canonical_coordinates(&sys.spec, &sys.sample_point, &CanonicalParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = chart.sample_coordinates(&mut rng, 100, 0.9);
    let times = random_times(&mut rng, 100, 2, 0.3);
    let r = chart.residuals(&samples, &times, &FlowParams::default()).unwrap();
    assert!(r.delta <= 1e-6 && r.darboux <= 1e-6 && r.linear <= 1e-6, "{r:?}");
}

#[test]
fn pendulum_rotation_chart() {
    let sys = lookup("pendulum").unwrap();
    let chart = canonical_coordinates(&sys.spec, &sys.sample_point, &CanonicalParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = chart.sample_coordinates(&mut rng, 40, 0.9);
    let times = random_times(&mut rng, 40, 1, 0.3);
    let r = chart.residuals(&samples, &times, &FlowParams::default()).unwrap();
    assert!(r.delta <= 1e-6 && r.darboux <= 1e-6 && r.linear <= 1e-6, "{r:?}");
}

#[test]
fn skewed_section_is_straightened() {
    let sys = lookup("uncoupled_oscillators").unwrap();
    let kappa = 0.3;
    let p0 = [1.0, 1.0, 0.0, 0.0];
    let f0 = sys.spec.values(&p0).unwrap();
    let base = BaseBox::around(f0.as_slice());
    let steps = pilot_steps(&sys.spec, &p0, 1.0).unwrap();
    let chart = AdaptedChart::new(&sys.spec, &p0, Arc::new(SkewedSection { kappa }), base.clone(), steps);
    for f in base.grid(3) {
        let c = chart.obstruction(&f).unwrap();
        assert!((c[(0, 1)] + kappa).abs() < 1e-12, "{c}");
    }
    let shift = lagrangianize_section(&chart).unwrap();
    for f in base.grid(3) {
        // s = (−κΔ₂/2, κΔ₁/2) about the base centre.
        let s = shift.value(&f).unwrap();
        let (d1, d2) = (f[0] - f0[0], f[1] - f0[1]);
        assert!((s[0] + 0.5 * kappa * d2).abs() < 1e-13 && (s[1] - 0.5 * kappa * d1).abs() < 1e-13);
        let c = corrected_obstruction(&chart, &shift, &f, 1e-3).unwrap();
        assert!(c.amax() <= 1e-7, "{c}");
    }
}

#[test]
fn primitive_of_exact_polynomial_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = tensor_grid(&[-1.0; 4], &[1.0; 4], 5);
    for _ in 0..5 {
        let beta: Vec<Expression> = (0..4).map(|_| random_polynomial(&mut rng, 2)).collect();
        let alpha = TwoForm::exterior_derivative(&beta).unwrap();
        let k = homotopy_primitive(&alpha, &[0.0; 4], &grid).unwrap();
        assert!(k.primitive_residual(&grid).unwrap() <= 1e-6);
        assert_eq!(k.eval(&[0.0; 4]).unwrap(), DVector::zeros(4));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn homotopy_operator_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, seed in 0u64..1000, x in proptest::collection::vec(-1.0..1.0f64, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1: Vec<Expression> = (0..4).map(|_| random_polynomial(&mut rng, 2)).collect();
        let b2: Vec<Expression> = (0..4).map(|_| random_polynomial(&mut rng, 2)).collect();
        let a1 = TwoForm::exterior_derivative(&b1).unwrap();
        let a2 = TwoForm::exterior_derivative(&b2).unwrap();
        let c = [0.1, -0.2, 0.0, 0.3];
        let combo = HomotopyPrimitive::new(&TwoForm::linear_combination(a, &a1, b, &a2), &c).eval(&x).unwrap();
        let sep = HomotopyPrimitive::new(&a1, &c).eval(&x).unwrap() * a + HomotopyPrimitive::new(&a2, &c).eval(&x).unwrap() * b;
        let scale = 1.0 + combo.amax();
        prop_assert!((combo - sep).amax() <= 1e-13 * scale);
    }
}
