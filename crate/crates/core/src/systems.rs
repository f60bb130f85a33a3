//! Built-in integrable systems with closed-form oracles.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::flows::IntegrableSystemSpec;
use crate::geometry::{ChartDomain, ScalarField, SymplecticStructure, TwoForm};
use crate::linalg;

/// Exact flow `ρ(t)(z)` of a catalog system.
pub type ExactFlow = fn(&[f64], &[f64]) -> Vec<f64>;

/// Analytic facts about a catalog system at its sample point.
#[derive(Debug, Clone, Default)]
pub struct Oracle {
    /// Stabilizer lattice basis at the sample point (`Some(vec![])` for a free orbit).
    pub lattice_basis: Option<Vec<Vec<f64>>>,
    pub exact_flow: Option<ExactFlow>,
}

#[derive(Debug, Clone)]
pub struct NamedSystem {
    pub id: &'static str,
    pub description: &'static str,
    pub spec: IntegrableSystemSpec,
    pub sample_point: Vec<f64>,
    pub oracle: Oracle,
}

/// Identifiers of every catalog entry.
pub const IDS: [&str; 6] = [
    "harmonic_oscillator",
    "uncoupled_oscillators",
    "pendulum",
    "free_translation",
    "nonstandard_form_2d",
    "constant_skew_form_4d",
];

pub fn catalog() -> Vec<NamedSystem> {
    IDS.iter().map(|id| lookup(id).expect("catalog entry")).collect()
}

pub fn lookup(id: &str) -> Result<NamedSystem> {
    Ok(match id {
        "harmonic_oscillator" => harmonic_oscillator(),
        "uncoupled_oscillators" => uncoupled_oscillators(1.0, 2f64.sqrt()),
        "pendulum" => pendulum(),
        "free_translation" => free_translation(),
        "nonstandard_form_2d" => nonstandard_form_2d(),
        "constant_skew_form_4d" => constant_skew_form_4d(0.1),
        _ => return Err(Error::UnknownSystem(id.to_string())),
    })
}

fn field(text: &str, n: usize) -> ScalarField {
    ScalarField::parse(text, n).expect("catalog expression")
}

/// `H = (q² + p²)/2` on `[−3, 3]²`.
pub fn harmonic_oscillator() -> NamedSystem {
    let omega = SymplecticStructure::standard(ChartDomain::cube(1, 3.0));
    NamedSystem {
        id: "harmonic_oscillator",
        description: "H = (q^2 + p^2)/2 with the standard form",
        spec: IntegrableSystemSpec::new(omega, vec![field("(q^2+p^2)/2", 1)]).expect("valid spec"),
        sample_point: vec![1.0, 0.0],
        oracle: Oracle {
            lattice_basis: Some(vec![vec![2.0 * PI]]),
            exact_flow: Some(|t, z| rotate(z[0], z[1], t[0]).to_vec()),
        },
    }
}

/// The flow of `X = (−p, q)`.
fn rotate(q: f64, p: f64, t: f64) -> [f64; 2] {
    let (s, c) = t.sin_cos();
    [q * c - p * s, q * s + p * c]
}

/// `H_k = w_k (q_k² + p_k²)/2` on `[−3, 3]⁴`.
pub fn uncoupled_oscillators(w1: f64, w2: f64) -> NamedSystem {
    let omega = SymplecticStructure::standard(ChartDomain::cube(2, 3.0));
    let h1 = ScalarField::from_expression(
        w1 * (Expression::parse("(q1^2+p1^2)/2", 2).expect("catalog expression")),
    );
    let h2 = ScalarField::from_expression(
        w2 * (Expression::parse("(q2^2+p2^2)/2", 2).expect("catalog expression")),
    );
    let flow: Option<ExactFlow> = if w1 == 1.0 && w2 == 2f64.sqrt() {
        Some(|t, z| {
            let a = rotate(z[0], z[2], t[0]);
            let b = rotate(z[1], z[3], 2f64.sqrt() * t[1]);
            vec![a[0], b[0], a[1], b[1]]
        })
    } else {
        None
    };
    NamedSystem {
        id: "uncoupled_oscillators",
        description: "two oscillators with frequencies 1 and sqrt(2)",
        spec: IntegrableSystemSpec::new(omega, vec![h1, h2]).expect("valid spec"),
        sample_point: vec![1.0, 1.0, 0.0, 0.0],
        oracle: Oracle {
            lattice_basis: Some(vec![vec![2.0 * PI / w1, 0.0], vec![0.0, 2.0 * PI / w2]]),
            exact_flow: flow,
        },
    }
}

/// `H = p²/2 − cos q` with `q` periodic, `p ∈ [−5, 5]`.
pub fn pendulum() -> NamedSystem {
    let chart = ChartDomain::new(1, &[(-PI, PI), (-5.0, 5.0)])
        .expect("valid chart")
        .with_period(0, 2.0 * PI);
    let omega = SymplecticStructure::standard(chart);
    let energy = 0.5 * 9.0 - 1.0;
    NamedSystem {
        id: "pendulum",
        description: "H = p^2/2 - cos q, sampled in the rotation regime",
        spec: IntegrableSystemSpec::new(omega, vec![field("p^2/2 - cos(q)", 1)]).expect("valid spec"),
        sample_point: vec![0.0, 3.0],
        oracle: Oracle {
            lattice_basis: Some(vec![vec![pendulum_rotation_period(energy)]]),
            exact_flow: None,
        },
    }
}

/// `H = p` on `q ∈ [−50, 50]`, `p ∈ [−3, 3]`; the flow is `q ↦ q − t`.
pub fn free_translation() -> NamedSystem {
    let chart = ChartDomain::new(1, &[(-50.0, 50.0), (-3.0, 3.0)]).expect("valid chart");
    let omega = SymplecticStructure::standard(chart);
    NamedSystem {
        id: "free_translation",
        description: "H = p, a free translation in q",
        spec: IntegrableSystemSpec::new(omega, vec![field("p", 1)]).expect("valid spec"),
        sample_point: vec![0.0, 1.0],
        oracle: Oracle {
            lattice_basis: Some(Vec::new()),
            exact_flow: Some(|t, z| vec![z[0] - t[0], z[1]]),
        },
    }
}

/// `ω = (1 + q²) dq∧dp`, `H = (q² + p²)/2` on `[−2, 2]²`.
pub fn nonstandard_form_2d() -> NamedSystem {
    let chart = ChartDomain::cube(1, 2.0);
    let coefficient = Expression::parse("1+q^2", 1).expect("catalog expression");
    let form = TwoForm::from_expressions(1, &[((0, 1), coefficient)]).expect("valid form");
    let omega = SymplecticStructure::new(chart, form).expect("valid structure");
    NamedSystem {
        id: "nonstandard_form_2d",
        description: "omega = (1 + q^2) dq^dp with H = (q^2 + p^2)/2",
        spec: IntegrableSystemSpec::new(omega, vec![field("(q^2+p^2)/2", 1)]).expect("valid spec"),
        sample_point: vec![1.0, 0.0],
        oracle: Oracle::default(),
    }
}

/// Coefficient matrix of `dq₁∧dp₁ + dq₂∧dp₂ + ε dq₁∧dq₂`.
pub fn skew_form_matrix(eps: f64) -> DMatrix<f64> {
    let mut m = linalg::standard_block(2);
    m[(0, 1)] = eps;
    m[(1, 0)] = -eps;
    m
}

/// `ω = dq₁∧dp₁ + dq₂∧dp₂ + ε dq₁∧dq₂` with `f = (q₁, q₂)`, whose fields are `∂_{p₁}`, `∂_{p₂}`.
pub fn constant_skew_form_4d(eps: f64) -> NamedSystem {
    let chart = ChartDomain::new(2, &[(-2.0, 2.0), (-2.0, 2.0), (-50.0, 50.0), (-50.0, 50.0)]).expect("valid chart");
    let omega = SymplecticStructure::constant(chart, &skew_form_matrix(eps)).expect("valid structure");
    NamedSystem {
        id: "constant_skew_form_4d",
        description: "constant form dq1^dp1 + dq2^dp2 + eps dq1^dq2 with f = (q1, q2)",
        spec: IntegrableSystemSpec::new(omega, vec![field("q1", 2), field("q2", 2)]).expect("valid spec"),
        sample_point: vec![0.1, 0.2, 0.3, 0.4],
        oracle: Oracle {
            lattice_basis: Some(Vec::new()),
            exact_flow: Some(|t, z| vec![z[0], z[1], z[2] + t[0], z[3] + t[1]]),
        },
    }
}

/// Complete elliptic integral of the first kind `K(k)` by the arithmetic–geometric mean.
pub fn elliptic_k(k: f64) -> f64 {
    let (mut a, mut b) = (1.0, (1.0 - k * k).sqrt());
    for _ in 0..64 {
        if (a - b).abs() <= 1e-16 * a {
            break;
        }
        let next = (0.5 * (a + b), (a * b).sqrt());
        a = next.0;
        b = next.1;
    }
    PI / (2.0 * a)
}

/// Time for a pendulum rotation of energy `e > 1` to advance `q` by `2π`:
/// `∫₀^{2π} dq / √(2(e + cos q)) = 4 K(k) / √(2(e + 1))` with `k² = 2/(e + 1)`.
pub fn pendulum_rotation_period(e: f64) -> f64 {
    assert!(e > 1.0, "rotation regime needs energy above 1");
    let k = (2.0 / (e + 1.0)).sqrt();
    4.0 * elliptic_k(k) / (2.0 * (e + 1.0)).sqrt()
}
