//! Charts, fields, forms and the symplectic linear algebra built on them.
//!
//! # Conventions
//!
//! Points of a chart are `z = (q_1, …, q_n, p_1, …, p_n)`. A 2-form is stored by
//! its strictly upper coefficients `ω_ij = ω(e_i, e_j)`, `i < j`, and acts as
//! `ω(u, v) = uᵀ Ω v` with the antisymmetric matrix `Ω` they define.
//!
//! The Hamiltonian field of `f` is the solution of `ι_X ω = −df`. Written out,
//! `ω(X, u) = −df(u)` for all `u`, i.e. `Ω X = ∇f`. With `ω = dq∧dp` this gives
//! `X_q = ∂_p`, `X_p = −∂_q` and `{q, p} = ω(X_q, X_p) = +1`. The Poisson bracket
//! is `{f, g} = ω(X_f, X_g) = dg(X_f)`, so flows run `q̇ = −∂H/∂p`, `ṗ = ∂H/∂q`:
//! the oscillator `H = (q² + p²)/2` has `X_H = (−p, q)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::linalg;
use crate::tolerances::{fd_step, NONDEGENERACY_FLOOR, TOL_CLOSED_EXACT, TOL_CLOSED_FD, TOL_SOLVE};

/// Index pairs `(i, j)` with `i < j` in storage order.
pub fn upper_pairs(dim: usize) -> Vec<(usize, usize)> {
    (0..dim)
        .flat_map(|i| (i + 1..dim).map(move |j| (i, j)))
        .collect()
}

/// Position of the pair `(i, j)`, `i < j`, in [`upper_pairs`] order.
pub fn pair_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < dim);
    i * dim - i * (i + 1) / 2 + (j - i - 1)
}

// ---------------------------------------------------------------------------
// ChartDomain

/// An axis-aligned box in `ℝ²ⁿ`, optionally periodic along some axes.
///
/// A periodic axis has no boundary: points are never out of the chart along it,
/// and [`ChartDomain::displacement`] measures differences modulo the period.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDomain {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    periods: Vec<Option<f64>>,
}

impl ChartDomain {
    pub fn new(n: usize, bounds: &[(f64, f64)]) -> Result<ChartDomain> {
        if n == 0 {
            return Err(Error::InvalidInput("chart needs n ≥ 1".into()));
        }
        if bounds.len() != 2 * n {
            return Err(Error::InvalidInput(format!(
                "chart with n = {n} needs {} bounds, got {}",
                2 * n,
                bounds.len()
            )));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidInput(format!(
                    "axis {} has empty range [{lo}, {hi}]",
                    coordinate_name(i, n)
                )));
            }
        }
        Ok(ChartDomain {
            n,
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
            periods: vec![None; 2 * n],
        })
    }

    /// The cube `[−half_width, half_width]^{2n}`.
    pub fn cube(n: usize, half_width: f64) -> ChartDomain {
        ChartDomain::new(n, &vec![(-half_width, half_width); 2 * n]).expect("valid cube")
    }

    /// The box centred at `center` with the given half widths.
    pub fn around(center: &[f64], half_widths: &[f64]) -> Result<ChartDomain> {
        let bounds: Vec<(f64, f64)> = center
            .iter()
            .zip(half_widths)
            .map(|(&c, &w)| (c - w, c + w))
            .collect();
        if !bounds.len().is_multiple_of(2) {
            return Err(Error::InvalidInput("odd chart dimension".into()));
        }
        ChartDomain::new(bounds.len() / 2, &bounds)
    }

    /// Marks `axis` periodic with the given period.
    pub fn with_period(mut self, axis: usize, period: f64) -> ChartDomain {
        assert!(period > 0.0, "period must be positive");
        self.periods[axis] = Some(period);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn period(&self, axis: usize) -> Option<f64> {
        self.periods[axis]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && (0..self.dim()).all(|i| {
                z[i].is_finite()
                    && (self.periods[i].is_some() || (self.lower[i] <= z[i] && z[i] <= self.upper[i]))
            })
    }

    pub fn check(&self, z: &[f64]) -> Result<()> {
        if self.contains(z) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { point: z.to_vec() })
        }
    }

    /// `b − a`, reduced to `(−P/2, P/2]` along periodic axes.
    pub fn displacement(&self, a: &[f64], b: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let d = b[i] - a[i];
                match self.periods[i] {
                    Some(p) => d - p * (d / p).round(),
                    None => d,
                }
            }),
        )
    }

    /// Euclidean distance measured with [`ChartDomain::displacement`].
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.displacement(a, b).norm()
    }

    /// Tensor grid with `k` equally spaced points per axis, endpoints included.
    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        tensor_grid(&self.lower, &self.upper, k)
    }

    /// `count` independent uniform samples.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                (0..self.dim())
                    .map(|i| rng.random_range(self.lower[i]..=self.upper[i]))
                    .collect()
            })
            .collect()
    }
}

/// Tensor grid over the box `[lower, upper]`, `k` points per axis.
pub fn tensor_grid(lower: &[f64], upper: &[f64], k: usize) -> Vec<Vec<f64>> {
    let d = lower.len();
    let axis = |i: usize, s: usize| {
        if k <= 1 {
            0.5 * (lower[i] + upper[i])
        } else {
            lower[i] + (upper[i] - lower[i]) * s as f64 / (k - 1) as f64
        }
    };
    let total = k.max(1).pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|i| {
                    let s = idx % k.max(1);
                    idx /= k.max(1);
                    axis(i, s)
                })
                .collect()
        })
        .collect()
}

/// Display name of coordinate `i` in a `2n`-dimensional chart.
pub fn coordinate_name(i: usize, n: usize) -> String {
    if i < n {
        format!("q{}", i + 1)
    } else {
        format!("p{}", i - n + 1)
    }
}

// ---------------------------------------------------------------------------
// finite differences

/// Central-difference gradient with step [`fd_step`] per axis.
pub fn fd_gradient(f: impl Fn(&[f64]) -> Result<f64>, z: &[f64]) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(z.len());
    let mut w = z.to_vec();
    for i in 0..z.len() {
        let h = fd_step(z[i]);
        w[i] = z[i] + h;
        let fp = f(&w)?;
        w[i] = z[i] - h;
        let fm = f(&w)?;
        w[i] = z[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Finite-difference stencil used for Jacobians of maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// Second-order central difference with step `1e-6·(1+|x|)`.
    Central,
    /// Fourth-order five-point stencil with a fixed step.
    FivePoint(f64),
}

/// Jacobian `∂map_i/∂x_j` by finite differences.
pub fn fd_jacobian(
    map: impl Fn(&[f64]) -> Result<DVector<f64>>,
    x: &[f64],
    stencil: Stencil,
) -> Result<DMatrix<f64>> {
    let mut cols = Vec::with_capacity(x.len());
    let mut w = x.to_vec();
    for j in 0..x.len() {
        let mut at = |offset: f64| -> Result<DVector<f64>> {
            w[j] = x[j] + offset;
            let v = map(&w);
            w[j] = x[j];
            v
        };
        let col = match stencil {
            Stencil::Central => {
                let h = fd_step(x[j]);
                (at(h)? - at(-h)?) / (2.0 * h)
            }
            Stencil::FivePoint(h) => {
                let p1 = at(h)?;
                let m1 = at(-h)?;
                let p2 = at(2.0 * h)?;
                let m2 = at(-2.0 * h)?;
                ((p1 - m1) * 8.0 - (p2 - m2)) / (12.0 * h)
            }
        };
        cols.push(col);
    }
    Ok(DMatrix::from_columns(&cols))
}

// ---------------------------------------------------------------------------
// ScalarField

type ValueFn = dyn Fn(&[f64]) -> Result<f64> + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync;

/// A smooth function on a chart with a gradient provider.
///
/// Fields built from expressions or with an explicit gradient differentiate
/// exactly; opaque fields fall back to central differences.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    value: Arc<ValueFn>,
    grad: Option<Arc<GradFn>>,
    label: Option<String>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("exact_gradient", &self.grad.is_some())
            .field("label", &self.label)
            .finish()
    }
}

impl ScalarField {
    /// Opaque field; gradients by central differences.
    pub fn from_fn(dim: usize, f: impl Fn(&[f64]) -> Result<f64> + Send + Sync + 'static) -> ScalarField {
        ScalarField {
            dim,
            value: Arc::new(f),
            grad: None,
            label: None,
        }
    }

    pub fn with_gradient(
        dim: usize,
        f: impl Fn(&[f64]) -> Result<f64> + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync + 'static,
    ) -> ScalarField {
        ScalarField {
            dim,
            value: Arc::new(f),
            grad: Some(Arc::new(grad)),
            label: None,
        }
    }

    /// Field defined by an expression, differentiated symbolically.
    pub fn from_expression(expr: Expression) -> ScalarField {
        let dim = 2 * expr.degrees_of_freedom();
        let partials = expr.gradient();
        let label = expr.to_string();
        let e = expr.clone();
        ScalarField {
            dim,
            value: Arc::new(move |z| Ok(e.eval(z)?)),
            grad: Some(Arc::new(move |z| {
                let mut g = DVector::zeros(partials.len());
                for (k, d) in partials.iter().enumerate() {
                    g[k] = d.eval(z)?;
                }
                Ok(g)
            })),
            label: Some(label),
        }
    }

    /// Parses `text` and wraps it with [`ScalarField::from_expression`].
    pub fn parse(text: &str, n: usize) -> std::result::Result<ScalarField, crate::expr::ParseError> {
        Ok(ScalarField::from_expression(Expression::parse(text, n)?))
    }

    pub fn constant(dim: usize, c: f64) -> ScalarField {
        ScalarField::with_gradient(dim, move |_| Ok(c), move |_| Ok(DVector::zeros(dim)))
            .labelled(c.to_string())
    }

    /// The coordinate function `z_i`.
    pub fn coordinate(dim: usize, i: usize) -> ScalarField {
        ScalarField::with_gradient(
            dim,
            move |z| Ok(z[i]),
            move |_| {
                let mut g = DVector::zeros(dim);
                g[i] = 1.0;
                Ok(g)
            },
        )
        .labelled(coordinate_name(i, dim / 2))
    }

    pub fn labelled(mut self, label: impl Into<String>) -> ScalarField {
        self.label = Some(label.into());
        self
    }

    /// Drops the exact gradient so that [`ScalarField::gradient`] uses finite differences.
    pub fn without_gradient(mut self) -> ScalarField {
        self.grad = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn has_exact_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        let v = (self.value)(z)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(crate::expr::EvalError::NonFinite))
        }
    }

    pub fn gradient(&self, z: &[f64]) -> Result<DVector<f64>> {
        match &self.grad {
            Some(g) => g(z),
            None => self.fd_gradient(z),
        }
    }

    /// Central-difference gradient regardless of the provider.
    pub fn fd_gradient(&self, z: &[f64]) -> Result<DVector<f64>> {
        fd_gradient(|w| self.value(w), z)
    }

    /// `x ↦ f(offset + linear·x)` with the chain-rule gradient `linearᵀ ∇f`.
    pub fn compose_affine(&self, offset: DVector<f64>, linear: DMatrix<f64>) -> ScalarField {
        assert_eq!(linear.nrows(), self.dim);
        let dim = linear.ncols();
        let image = {
            let offset = offset.clone();
            let linear = linear.clone();
            move |x: &[f64]| -> Vec<f64> {
                (offset.clone() + &linear * DVector::from_column_slice(x)).as_slice().to_vec()
            }
        };
        let inner = self.clone();
        let inner_g = self.clone();
        let image_g = image.clone();
        let lt = linear.transpose();
        ScalarField {
            dim,
            value: Arc::new(move |x| inner.value(&image(x))),
            grad: Some(Arc::new(move |x| Ok(&lt * inner_g.gradient(&image_g(x))?))),
            label: self.label.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// VectorField

type VecFn = dyn Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync;

/// A vector field on a chart.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<VecFn>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField").field("dim", &self.dim).finish()
    }
}

impl VectorField {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync + 'static) -> VectorField {
        VectorField {
            dim,
            eval: Arc::new(f),
        }
    }

    /// A constant field.
    pub fn constant(v: DVector<f64>) -> VectorField {
        VectorField::new(v.len(), move |_| Ok(v.clone()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, z: &[f64]) -> Result<DVector<f64>> {
        let v = (self.eval)(z)?;
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::Eval(crate::expr::EvalError::NonFinite))
        }
    }
}

// ---------------------------------------------------------------------------
// forms

/// Pointwise covector field.
#[derive(Clone)]
pub struct OneForm {
    dim: usize,
    coeff: Arc<VecFn>,
}

impl fmt::Debug for OneForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OneForm").field("dim", &self.dim).finish()
    }
}

impl OneForm {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync + 'static) -> OneForm {
        OneForm {
            dim,
            coeff: Arc::new(f),
        }
    }

    /// `df` of a scalar field.
    pub fn differential(f: &ScalarField) -> OneForm {
        let f = f.clone();
        OneForm::new(f.dim(), move |z| f.gradient(z))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coefficients(&self, z: &[f64]) -> Result<DVector<f64>> {
        (self.coeff)(z)
    }

    pub fn evaluate(&self, z: &[f64], u: &DVector<f64>) -> Result<f64> {
        Ok(self.coefficients(z)?.dot(u))
    }

    /// `dβ` by central differences: `(dβ)_ij = ∂_i β_j − ∂_j β_i`.
    pub fn exterior_derivative_fd(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let jac = fd_jacobian(|w| self.coefficients(w), z, Stencil::Central)?;
        Ok(&jac.transpose() - &jac)
    }
}

type UpperFn = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync;
type PartialsFn = dyn Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Send + Sync;

/// Pointwise 2-form stored by its strictly upper coefficients.
///
/// An optional derivative provider returns, for each axis `k`, the vector of
/// `∂_k ω_ij` in storage order.
#[derive(Clone)]
pub struct TwoForm {
    dim: usize,
    upper: Arc<UpperFn>,
    partials: Option<Arc<PartialsFn>>,
}

impl fmt::Debug for TwoForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoForm")
            .field("dim", &self.dim)
            .field("exact_derivatives", &self.partials.is_some())
            .finish()
    }
}

impl TwoForm {
    pub fn from_upper(dim: usize, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static) -> TwoForm {
        TwoForm {
            dim,
            upper: Arc::new(f),
            partials: None,
        }
    }

    pub fn with_partials(
        mut self,
        partials: impl Fn(&[f64]) -> Result<Vec<Vec<f64>>> + Send + Sync + 'static,
    ) -> TwoForm {
        self.partials = Some(Arc::new(partials));
        self
    }

    /// Form whose coefficient matrix is computed by `f`; only its strictly upper part is read.
    pub fn from_matrix_fn(
        dim: usize,
        f: impl Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    ) -> TwoForm {
        let pairs = upper_pairs(dim);
        TwoForm::from_upper(dim, move |z| {
            let m = f(z)?;
            Ok(pairs.iter().map(|&(i, j)| m[(i, j)]).collect())
        })
    }

    /// Constant form; its derivatives vanish exactly.
    pub fn constant(m: &DMatrix<f64>) -> TwoForm {
        let dim = m.nrows();
        let coeffs: Vec<f64> = upper_pairs(dim).iter().map(|&(i, j)| m[(i, j)]).collect();
        let zeros = vec![vec![0.0; coeffs.len()]; dim];
        TwoForm::from_upper(dim, move |_| Ok(coeffs.clone())).with_partials(move |_| Ok(zeros.clone()))
    }

    pub fn zero(dim: usize) -> TwoForm {
        TwoForm::constant(&DMatrix::zeros(dim, dim))
    }

    /// Form with expression coefficients `ω_ij` (`i < j`, 0-based) and exact derivatives.
    /// Pairs not listed are zero.
    pub fn from_expressions(n: usize, entries: &[((usize, usize), Expression)]) -> Result<TwoForm> {
        let dim = 2 * n;
        let pairs = upper_pairs(dim);
        let mut coeffs = vec![Expression::constant(n, 0.0); pairs.len()];
        for ((i, j), e) in entries {
            if !(i < j && *j < dim) {
                return Err(Error::InvalidInput(format!(
                    "form entry ({}, {}) must satisfy i < j ≤ {dim}",
                    i + 1,
                    j + 1
                )));
            }
            if e.degrees_of_freedom() != n {
                return Err(Error::InvalidInput("form entry has the wrong dimension".into()));
            }
            coeffs[pair_index(dim, *i, *j)] = e.clone();
        }
        let derivs: Vec<Vec<Expression>> = (0..dim)
            .map(|k| coeffs.iter().map(|e| e.derivative(k)).collect())
            .collect();
        let form = TwoForm::from_upper(dim, move |z| {
            coeffs.iter().map(|e| Ok(e.eval(z)?)).collect()
        })
        .with_partials(move |z| {
            derivs
                .iter()
                .map(|row| row.iter().map(|e| Ok(e.eval(z)?)).collect())
                .collect()
        });
        Ok(form)
    }

    /// `dβ` for a 1-form with expression coefficients.
    pub fn exterior_derivative(beta: &[Expression]) -> Result<TwoForm> {
        let dim = beta.len();
        if !dim.is_multiple_of(2) || dim == 0 {
            return Err(Error::InvalidInput("1-form needs an even number of components".into()));
        }
        let entries: Vec<_> = upper_pairs(dim)
            .into_iter()
            .map(|(i, j)| ((i, j), beta[j].derivative(i) - beta[i].derivative(j)))
            .collect();
        TwoForm::from_expressions(dim / 2, &entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_exact_derivatives(&self) -> bool {
        self.partials.is_some()
    }

    pub fn upper(&self, z: &[f64]) -> Result<Vec<f64>> {
        let u = (self.upper)(z)?;
        if u.iter().all(|v| v.is_finite()) {
            Ok(u)
        } else {
            Err(Error::Eval(crate::expr::EvalError::NonFinite))
        }
    }

    /// The antisymmetric coefficient matrix `Ω(z)`.
    pub fn matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(antisymmetric_from_upper(self.dim, &self.upper(z)?))
    }

    /// `ω_z(u, v)`, exactly antisymmetric in `(u, v)`.
    pub fn evaluate(&self, z: &[f64], u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        Ok(pair_upper(self.dim, &self.upper(z)?, u, v))
    }

    /// `∂_k ω_ij` for every axis `k`, exact when available.
    pub fn partials(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        if let Some(p) = &self.partials {
            return p(z);
        }
        let mut out = Vec::with_capacity(self.dim);
        let mut w = z.to_vec();
        for k in 0..self.dim {
            let h = fd_step(z[k]);
            w[k] = z[k] + h;
            let plus = self.upper(&w)?;
            w[k] = z[k] - h;
            let minus = self.upper(&w)?;
            w[k] = z[k];
            out.push(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect());
        }
        Ok(out)
    }

    /// `aα + bβ`.
    pub fn linear_combination(a: f64, alpha: &TwoForm, b: f64, beta: &TwoForm) -> TwoForm {
        assert_eq!(alpha.dim, beta.dim);
        let (x, y) = (alpha.clone(), beta.clone());
        TwoForm::from_upper(alpha.dim, move |z| {
            let u = x.upper(z)?;
            let v = y.upper(z)?;
            Ok(u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect())
        })
    }
}

fn antisymmetric_from_upper(dim: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    let mut idx = 0;
    for i in 0..dim {
        for j in i + 1..dim {
            m[(i, j)] = upper[idx];
            m[(j, i)] = -upper[idx];
            idx += 1;
        }
    }
    m
}

/// `Σ_{i<j} ω_ij (u_i v_j − u_j v_i)`.
fn pair_upper(dim: usize, upper: &[f64], u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    let mut idx = 0;
    for i in 0..dim {
        for j in i + 1..dim {
            s += upper[idx] * (u[i] * v[j] - u[j] * v[i]);
            idx += 1;
        }
    }
    s
}

/// `ω_p(u, v)`.
pub fn evaluate_form(form: &TwoForm, p: &[f64], u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    form.evaluate(p, u, v)
}

// ---------------------------------------------------------------------------
// maps and pullbacks

type MatFn = dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync;

/// A smooth map between charts with a Jacobian provider.
#[derive(Clone)]
pub struct ChartMap {
    dim_in: usize,
    forward: Arc<VecFn>,
    jacobian: Option<Arc<MatFn>>,
    stencil: Stencil,
}

impl fmt::Debug for ChartMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChartMap")
            .field("dim_in", &self.dim_in)
            .field("exact_jacobian", &self.jacobian.is_some())
            .field("stencil", &self.stencil)
            .finish()
    }
}

impl ChartMap {
    pub fn new(dim_in: usize, f: impl Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync + 'static) -> ChartMap {
        ChartMap {
            dim_in,
            forward: Arc::new(f),
            jacobian: None,
            stencil: Stencil::Central,
        }
    }

    pub fn with_jacobian(
        mut self,
        j: impl Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    ) -> ChartMap {
        self.jacobian = Some(Arc::new(j));
        self
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> ChartMap {
        self.stencil = stencil;
        self
    }

    pub fn identity(dim: usize) -> ChartMap {
        ChartMap::new(dim, |x| Ok(DVector::from_column_slice(x)))
            .with_jacobian(move |_| Ok(DMatrix::identity(dim, dim)))
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        (self.forward)(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match &self.jacobian {
            Some(j) => j(x),
            None => fd_jacobian(|w| self.apply(w), x, self.stencil),
        }
    }
}

/// `(Φ*ω)_x(u, v) = ω_{Φ(x)}(DΦ u, DΦ v)`.
pub fn pullback_two_form(map: &ChartMap, form: &TwoForm) -> TwoForm {
    let map = map.clone();
    let form = form.clone();
    TwoForm::from_matrix_fn(map.dim_in(), move |x| {
        let y = map.apply(x)?;
        let j = map.jacobian(x)?;
        Ok(j.transpose() * form.matrix(y.as_slice())? * j)
    })
}

// ---------------------------------------------------------------------------
// SymplecticStructure

/// A symplectic form on a chart.
#[derive(Debug, Clone)]
pub struct SymplecticStructure {
    chart: ChartDomain,
    form: TwoForm,
}

impl SymplecticStructure {
    pub fn new(chart: ChartDomain, form: TwoForm) -> Result<SymplecticStructure> {
        if form.dim() != chart.dim() {
            return Err(Error::InvalidInput(format!(
                "form of dimension {} on a chart of dimension {}",
                form.dim(),
                chart.dim()
            )));
        }
        Ok(SymplecticStructure { chart, form })
    }

    /// `Σ dq_i ∧ dp_i`.
    pub fn standard(chart: ChartDomain) -> SymplecticStructure {
        let j = linalg::standard_block(chart.n());
        SymplecticStructure {
            form: TwoForm::constant(&j),
            chart,
        }
    }

    pub fn constant(chart: ChartDomain, m: &DMatrix<f64>) -> Result<SymplecticStructure> {
        SymplecticStructure::new(chart, TwoForm::constant(m))
    }

    pub fn chart(&self) -> &ChartDomain {
        &self.chart
    }

    pub fn form(&self) -> &TwoForm {
        &self.form
    }

    /// The form with evaluation restricted to the chart.
    pub fn checked_form(&self) -> TwoForm {
        let chart = self.chart.clone();
        let form = self.form.clone();
        TwoForm::from_upper(self.chart.dim(), move |z| {
            chart.check(z)?;
            form.upper(z)
        })
    }

    /// Replaces the chart, keeping the form.
    pub fn on_chart(&self, chart: ChartDomain) -> Result<SymplecticStructure> {
        SymplecticStructure::new(chart, self.form.clone())
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.chart.check(z)?;
        self.form.matrix(z)
    }

    pub fn evaluate(&self, z: &[f64], u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.chart.check(z)?;
        self.form.evaluate(z, u, v)
    }

    /// Solves `Ω(z) X = ∇f(z)` for the Hamiltonian field of a function with the given gradient.
    pub fn solve_hamiltonian(&self, z: &[f64], grad: &DVector<f64>) -> Result<DVector<f64>> {
        let omega = self.matrix(z)?;
        let det = omega.determinant();
        if !(det.abs() >= NONDEGENERACY_FLOOR) {
            return Err(Error::SingularForm {
                point: z.to_vec(),
                det,
            });
        }
        if grad.iter().all(|g| *g == 0.0) {
            return Ok(DVector::zeros(grad.len()));
        }
        let x = linalg::solve(&omega, grad).ok_or(Error::SingularForm {
            point: z.to_vec(),
            det,
        })?;
        let residual = (&omega * &x - grad).amax();
        let scale = linalg::max_abs(&omega) * x.amax() + grad.amax();
        if residual > TOL_SOLVE * scale {
            return Err(Error::SolveResidual {
                residual: residual / scale,
            });
        }
        Ok(x)
    }

    pub fn hamiltonian_vector_field(&self, f: &ScalarField, z: &[f64]) -> Result<DVector<f64>> {
        self.chart.check(z)?;
        let g = f.gradient(z)?;
        self.solve_hamiltonian(z, &g)
    }

    /// `X_f` as a vector field.
    pub fn vector_field(&self, f: &ScalarField) -> VectorField {
        let omega = self.clone();
        let f = f.clone();
        VectorField::new(self.dim(), move |z| omega.hamiltonian_vector_field(&f, z))
    }

    pub fn poisson_bracket(&self, f: &ScalarField, g: &ScalarField, z: &[f64]) -> Result<f64> {
        let xf = self.hamiltonian_vector_field(f, z)?;
        let xg = self.hamiltonian_vector_field(g, z)?;
        self.evaluate(z, &xf, &xg)
    }

    /// `{f, g}` as a scalar field (gradient by finite differences).
    pub fn bracket_field(&self, f: &ScalarField, g: &ScalarField) -> ScalarField {
        let omega = self.clone();
        let (f, g) = (f.clone(), g.clone());
        ScalarField::from_fn(self.dim(), move |z| omega.poisson_bracket(&f, &g, z))
    }
}

/// `X(p)` solving `ι_X ω = −df`.
pub fn hamiltonian_vector_field(omega: &SymplecticStructure, f: &ScalarField, p: &[f64]) -> Result<DVector<f64>> {
    omega.hamiltonian_vector_field(f, p)
}

/// `{f1, f2}_ω(p) = ω_p(X_{f1}, X_{f2})`.
pub fn poisson_bracket(omega: &SymplecticStructure, f1: &ScalarField, f2: &ScalarField, p: &[f64]) -> Result<f64> {
    omega.poisson_bracket(f1, f2, p)
}

// ---------------------------------------------------------------------------
// checks

/// Outcome of [`check_closed`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosednessReport {
    /// `max |∂_iω_jk + ∂_jω_ki + ∂_kω_ij|` over the grid and `i < j < k`.
    pub residual: f64,
    pub worst_point: Option<Vec<f64>>,
    /// Whether the derivatives were exact.
    pub exact: bool,
    pub tolerance: f64,
}

impl ClosednessReport {
    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

/// Closedness residual of `form` over `grid`. Points where the form cannot be
/// evaluated count as infinite residual.
pub fn check_closed(form: &TwoForm, grid: &[Vec<f64>]) -> ClosednessReport {
    let dim = form.dim();
    let mut residual = 0.0_f64;
    let mut worst = None;
    for z in grid {
        let r = match form.partials(z) {
            Ok(d) => {
                let mut r = 0.0_f64;
                for i in 0..dim {
                    for j in i + 1..dim {
                        for k in j + 1..dim {
                            // ω_ki = −ω_ik.
                            let s = d[i][pair_index(dim, j, k)] - d[j][pair_index(dim, i, k)]
                                + d[k][pair_index(dim, i, j)];
                            r = r.max(s.abs());
                        }
                    }
                }
                r
            }
            Err(_) => f64::INFINITY,
        };
        if r > residual || (worst.is_none() && r >= residual) {
            residual = r;
            worst = Some(z.clone());
        }
    }
    let exact = form.has_exact_derivatives();
    ClosednessReport {
        residual,
        worst_point: worst,
        exact,
        tolerance: if exact { TOL_CLOSED_EXACT } else { TOL_CLOSED_FD },
    }
}

/// Outcome of [`check_nondegenerate`].
#[derive(Debug, Clone, PartialEq)]
pub struct NondegeneracyReport {
    pub min_abs_det: f64,
    pub worst_point: Option<Vec<f64>>,
    /// Grid points with `|det Ω| < floor`.
    pub degenerate_points: Vec<Vec<f64>>,
    pub floor: f64,
}

impl NondegeneracyReport {
    pub fn passed(&self) -> bool {
        self.degenerate_points.is_empty()
    }
}

pub fn check_nondegenerate(form: &TwoForm, grid: &[Vec<f64>]) -> NondegeneracyReport {
    let mut min_abs_det = f64::INFINITY;
    let mut worst = None;
    let mut degenerate = Vec::new();
    for z in grid {
        let d = form.matrix(z).map(|m| m.determinant().abs()).unwrap_or(0.0);
        if d < min_abs_det {
            min_abs_det = d;
            worst = Some(z.clone());
        }
        if !(d >= NONDEGENERACY_FLOOR) {
            degenerate.push(z.clone());
        }
    }
    NondegeneracyReport {
        min_abs_det,
        worst_point: worst,
        degenerate_points: degenerate,
        floor: NONDEGENERACY_FLOOR,
    }
}
