#![allow(dead_code)]

use liouville::expr::Expression;
use liouville::foliation::Section;
use liouville::linalg::{max_abs, standard_block};
use liouville::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_times(rng: &mut ChaCha8Rng, count: usize, n: usize, w: f64) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..n).map(|_| rng.random_range(-w..=w)).collect()).collect()
}

pub fn random_polynomial(rng: &mut ChaCha8Rng, n: usize) -> Expression {
    let dim = 2 * n;
    let mut e = Expression::constant(n, rng.random_range(-1.0..1.0));
    for _ in 0..6 {
        let mut term = Expression::constant(n, rng.random_range(-1.0..1.0));
        for _ in 0..rng.random_range(1..=3) {
            term = term * Expression::variable(n, rng.random_range(0..dim));
        }
        e = e + term;
    }
    e
}

/// Symplectic Gram–Schmidt: columns `(u_1..u_n, v_1..v_n)` with `LᵀΩL = J`.
pub fn canonical_basis(omega: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = omega.nrows();
    let n = dim / 2;
    let w = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * omega * b)[(0, 0)];
    let mut pool: Vec<DVector<f64>> = (0..dim).map(|i| DVector::from_fn(dim, |r, _| if r == i { 1.0 } else { 0.0 })).collect();
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    while !pool.is_empty() {
        let u = pool.remove(0);
        let (pos, _) = pool
            .iter()
            .enumerate()
            .map(|(i, v)| (i, w(&u, v).abs()))
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let v = pool.remove(pos);
        let v = &v / w(&u, &v);
        pool = pool
            .into_iter()
            .map(|x| {
                let (a, b) = (w(&x, &v), w(&x, &u));
                &x - &u * a + &v * b
            })
            .collect();
        us.push(u);
        vs.push(v);
    }
    assert_eq!(us.len(), n);
    DMatrix::from_columns(&us.into_iter().chain(vs).collect::<Vec<_>>())
}

pub fn symplectic_defect(m: &DMatrix<f64>) -> f64 {
    let j = standard_block(m.nrows() / 2);
    max_abs(&(m.transpose() * &j * m - j))
}

/// `σ̃(h) = ρ((0, κ h₁))(σ(h))` for the uncoupled oscillators, with exact Jacobian.
pub struct SkewedSection {
    pub kappa: f64,
}

impl SkewedSection {
    fn blocks(&self, h: &[f64]) -> (f64, f64, f64) {
        let r1 = (2.0 * h[0]).sqrt();
        let r2 = (2.0 * h[1] / 2f64.sqrt()).sqrt();
        // The second flow rotates block 2 by angle √2·κ·h₁.
        (r1, r2, 2f64.sqrt() * self.kappa * h[0])
    }
}

impl Section for SkewedSection {
    fn n(&self) -> usize {
        2
    }

    fn point(&self, h: &[f64]) -> Result<DVector<f64>> {
        let (r1, r2, a) = self.blocks(h);
        Ok(DVector::from_vec(vec![r1, r2 * a.cos(), 0.0, r2 * a.sin()]))
    }

    fn jacobian(&self, h: &[f64]) -> Result<DMatrix<f64>> {
        let (r1, r2, a) = self.blocks(h);
        let dr1 = 1.0 / r1;
        let dr2 = 1.0 / (2f64.sqrt() * r2);
        let da = 2f64.sqrt() * self.kappa;
        Ok(DMatrix::from_row_slice(
            4,
            2,
            &[
                dr1,
                0.0,
                -r2 * a.sin() * da,
                dr2 * a.cos(),
                0.0,
                0.0,
                r2 * a.cos() * da,
                dr2 * a.sin(),
            ],
        ))
    }
}
