//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` by LU with partial pivoting and one refinement sweep.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b)?;
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-13).max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Singular values, largest first.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Smallest singular value (`0` for an empty matrix).
pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

/// Orthonormal basis (as columns) of the span of the columns of `v`,
/// dropping columns that are dependent below `tol`.
pub fn orthonormal_basis(v: &DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for col in v.column_iter() {
        let mut w = col.clone_owned();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let norm = w.norm();
        if norm > tol {
            basis.push(w / norm);
        }
    }
    basis
}

/// Orthonormal basis of the orthogonal complement of the column span of `v`
/// in `ℝ^d`, built by pivoted Gram–Schmidt over the standard basis so that
/// the result is deterministic and aligned with coordinate axes when possible.
pub fn orthogonal_complement(v: &DMatrix<f64>) -> DMatrix<f64> {
    let d = v.nrows();
    let mut basis = orthonormal_basis(v, 1e-12);
    let span_dim = basis.len();
    let mut used = vec![false; d];
    let mut cols = Vec::new();
    while basis.len() < d {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for i in (0..d).filter(|&i| !used[i]) {
            let mut w = DVector::zeros(d);
            w[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&w);
                    w.axpy(-c, b, 1.0);
                }
            }
            let norm = w.norm();
            if best.as_ref().is_none_or(|(_, _, n)| norm > *n + 1e-12) {
                best = Some((i, w, norm));
            }
        }
        let Some((i, w, norm)) = best else { break };
        used[i] = true;
        if norm < 1e-12 {
            continue;
        }
        let w = w / norm;
        basis.push(w.clone());
        cols.push(w);
    }
    debug_assert_eq!(cols.len(), d - span_dim);
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// `max |a_ij|`.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// The standard block `[[0, I], [−I, 0]]` of size `2n`.
pub fn standard_block(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_orthogonal_and_full() {
        let v = DMatrix::from_column_slice(4, 2, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let w = orthogonal_complement(&v);
        assert_eq!(w.ncols(), 2);
        assert!(max_abs(&(v.transpose() * &w)) < 1e-14);
        assert!(max_abs(&(w.transpose() * &w - DMatrix::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn complement_prefers_axes() {
        let v = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let w = orthogonal_complement(&v);
        assert_eq!(w.column(0).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn least_squares_consistent_system() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let b = &a * &x;
        let y = least_squares(&a, &b);
        assert!((y - x).norm() < 1e-14);
    }
}
