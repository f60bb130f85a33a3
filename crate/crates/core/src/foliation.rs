//! Canonical coordinates near a regular orbit.
//!
//! The construction has three steps:
//!
//! 1. An affine section `σ` through `p₀`, transversal to the orbit, with
//!    `F(σ(f)) = f`. Flowing from it gives the adapted chart `Φ(f, t) = ρ(t)(σ(f))`.
//! 2. The obstruction `c_jk(f) = ω(Dσ e_j, Dσ e_k)` is a closed 2-form on the base.
//!    With `s = −K(c)`, `K` the radial homotopy operator, the shifted section
//!    `σ'(f) = ρ(−s(f))(σ(f))` is lagrangian.
//! 3. The angles are `θ = t + s(F)`, and in the coordinates `(f, θ)` the form
//!    is `Σ df_k ∧ dθ_k` while the joint flow is `θ ↦ θ + t`.
//!
//! Chart maps use a fixed number of integrator steps, so they are smooth in
//! their arguments and finite differences through them are clean.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::{combined_flow_fixed, detect_period_lattice, joint_action, FlowParams, IntegrableSystemSpec, LatticeSearch, OrbitTopology};
use crate::geometry::{check_closed, fd_jacobian, tensor_grid, ChartMap, OneForm, Stencil, TwoForm};
use crate::linalg;
use crate::ode::{Dop853, OdeOptions};
use crate::quadrature::GaussLegendre;
use crate::tolerances::{RANK_FLOOR, SHRINK_FLOOR};

// ---------------------------------------------------------------------------
// base boxes

/// An axis-aligned box in the space of values `f ∈ ℝⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseBox {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
}

impl BaseBox {
    /// Half widths of 10% of `|F(p₀)|` per axis, or `0.1` where `F(p₀)` vanishes.
    pub fn around(center: &[f64]) -> BaseBox {
        BaseBox {
            center: center.to_vec(),
            half_widths: center.iter().map(|c| if *c == 0.0 { 0.1 } else { 0.1 * c.abs() }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_widths).map(|(c, w)| c - w).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().zip(&self.half_widths).map(|(c, w)| c + w).collect()
    }

    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        tensor_grid(&self.lower(), &self.upper(), k)
    }

    pub fn contains(&self, f: &[f64]) -> bool {
        f.iter()
            .zip(&self.center)
            .zip(&self.half_widths)
            .all(|((x, c), w)| (x - c).abs() <= w * (1.0 + 1e-12))
    }

    pub fn halved(&self) -> BaseBox {
        BaseBox {
            center: self.center.clone(),
            half_widths: self.half_widths.iter().map(|w| 0.5 * w).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_widths)
            .map(|(c, w)| c + w * rng.random_range(-1.0..=1.0))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// sections

/// A section of the orbit foliation parametrised by the values of `F`.
pub trait Section: Send + Sync {
    fn n(&self) -> usize;
    /// `σ(f)`.
    fn point(&self, f: &[f64]) -> Result<DVector<f64>>;
    /// `Dσ(f)`, of size `2n × n`.
    fn jacobian(&self, f: &[f64]) -> Result<DMatrix<f64>>;
}

/// The section through `p₀` inside `p₀ + W`, `W = span{X_j(p₀)}^⊥`.
#[derive(Clone)]
pub struct AffineSection {
    spec: IntegrableSystemSpec,
    p0: DVector<f64>,
    w: DMatrix<f64>,
}

impl fmt::Debug for AffineSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineSection").field("p0", &self.p0.as_slice()).field("w", &self.w).finish()
    }
}

/// Builds the affine section through a regular point.
pub fn build_section(spec: &IntegrableSystemSpec, p0: &[f64]) -> Result<AffineSection> {
    spec.chart().check(p0)?;
    let sigma_min = linalg::sigma_min(&spec.differential(p0)?);
    if !(sigma_min >= RANK_FLOOR) {
        return Err(Error::NotRegular { sigma_min });
    }
    let w = linalg::orthogonal_complement(&spec.fields(p0)?);
    if w.ncols() != spec.n() {
        return Err(Error::NotRegular { sigma_min: 0.0 });
    }
    Ok(AffineSection {
        spec: spec.clone(),
        p0: DVector::from_column_slice(p0),
        w,
    })
}

impl AffineSection {
    /// Directions spanning the section.
    pub fn directions(&self) -> &DMatrix<f64> {
        &self.w
    }

    fn solve(&self, f: &[f64]) -> Result<DVector<f64>> {
        let target = DVector::from_column_slice(f);
        let p0 = &self.p0;
        let j0 = self.spec.differential(p0.as_slice())? * &self.w;
        let f0 = self.spec.values(p0.as_slice())?;
        let mut c = linalg::solve(&j0, &(&target - f0)).ok_or_else(|| Error::NewtonDivergence {
            context: "section: singular transversal Jacobian".into(),
        })?;
        let scale = 1.0 + target.amax();
        for _ in 0..60 {
            let z = p0 + &self.w * &c;
            let r = match self.spec.values(z.as_slice()) {
                Ok(v) => v - &target,
                Err(_) => break,
            };
            if r.amax() <= 1e-14 * scale {
                return Ok(z);
            }
            let j = self.spec.differential(z.as_slice())? * &self.w;
            let Some(dc) = linalg::solve(&j, &r) else { break };
            c -= dc;
        }
        let z = p0 + &self.w * &c;
        match self.spec.values(z.as_slice()) {
            Ok(v) if (&v - &target).amax() <= 1e-11 * scale => Ok(z),
            _ => Err(Error::NewtonDivergence {
                context: format!("section at f = {f:?}"),
            }),
        }
    }
}

impl Section for AffineSection {
    fn n(&self) -> usize {
        self.spec.n()
    }

    fn point(&self, f: &[f64]) -> Result<DVector<f64>> {
        self.solve(f)
    }

    /// Implicit differentiation of `F(p₀ + W c(f)) = f`: `Dσ = W (dF W)⁻¹`.
    fn jacobian(&self, f: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.solve(f)?;
        let j = self.spec.differential(z.as_slice())? * &self.w;
        let inv = j.try_inverse().ok_or_else(|| Error::NewtonDivergence {
            context: "section: singular transversal Jacobian".into(),
        })?;
        Ok(&self.w * inv)
    }
}

// ---------------------------------------------------------------------------
// adapted chart

/// `Φ(f, t) = ρ(t)(σ(f))` on a base box.
#[derive(Clone)]
pub struct AdaptedChart {
    spec: IntegrableSystemSpec,
    p0: DVector<f64>,
    section: Arc<dyn Section>,
    base: BaseBox,
    steps: usize,
}

impl fmt::Debug for AdaptedChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptedChart")
            .field("p0", &self.p0.as_slice())
            .field("base", &self.base)
            .field("steps", &self.steps)
            .finish()
    }
}

/// Step count for fixed-step flows of `Σ t_j X_j` with `|t_j| ≤ t_max`, from
/// an adaptive pilot run at tight tolerance.
pub fn pilot_steps(spec: &IntegrableSystemSpec, p: &[f64], t_max: f64) -> Result<usize> {
    let t = vec![t_max; spec.n()];
    let rhs = |z: &[f64]| spec.combined_field(&t, z);
    let opts = OdeOptions {
        rtol: 1e-13,
        atol: 1e-13,
        ..OdeOptions::default()
    };
    let mut solver = Dop853::new(rhs, DVector::from_column_slice(p), opts)?;
    let chart = spec.chart();
    match solver.advance_to(1.0, &|z| chart.contains(z)) {
        Ok(()) | Err(Error::LeftDomain { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok((2 * solver.accepted_steps() + 4).max(8))
}

impl AdaptedChart {
    pub fn new(spec: &IntegrableSystemSpec, p0: &[f64], section: Arc<dyn Section>, base: BaseBox, steps: usize) -> AdaptedChart {
        AdaptedChart {
            spec: spec.clone(),
            p0: DVector::from_column_slice(p0),
            section,
            base,
            steps,
        }
    }

    pub fn spec(&self) -> &IntegrableSystemSpec {
        &self.spec
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.p0
    }

    pub fn base(&self) -> &BaseBox {
        &self.base
    }

    pub fn section(&self) -> &Arc<dyn Section> {
        &self.section
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    /// `ρ(t)(σ(f))`.
    pub fn forward(&self, f: &[f64], t: &[f64]) -> Result<DVector<f64>> {
        let s = self.section.point(f)?;
        self.flow(t, s.as_slice())
    }

    /// `ρ(t)(z)` with the chart's fixed step count.
    pub fn flow(&self, t: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        if t.iter().all(|v| *v == 0.0) {
            return Ok(DVector::from_column_slice(z));
        }
        combined_flow_fixed(&self.spec, t, z, self.steps)
    }

    /// `(f, t)` with `Φ(f, t) = z`, starting the time solve from `t_guess`.
    pub fn invert_from(&self, z: &[f64], t_guess: Option<DVector<f64>>) -> Result<(DVector<f64>, DVector<f64>)> {
        let chart = self.spec.chart();
        let f = self.spec.values(z)?;
        let s = self.section.point(f.as_slice())?;
        let mut t = match t_guess {
            Some(t) => t,
            None => linalg::least_squares(&self.spec.fields(s.as_slice())?, &chart.displacement(s.as_slice(), z)),
        };
        let scale = 1.0 + DVector::from_column_slice(z).amax();
        let mut best = f64::INFINITY;
        for _ in 0..40 {
            let y = self.flow(t.as_slice(), s.as_slice())?;
            let r = chart.displacement(y.as_slice(), z);
            let rn = r.amax();
            best = best.min(rn);
            if rn <= 1e-14 * scale {
                return Ok((f, t));
            }
            let step = linalg::least_squares(&self.spec.fields(y.as_slice())?, &r);
            t += &step;
            if step.amax() <= 1e-16 * (1.0 + t.amax()) {
                break;
            }
        }
        if best <= 1e-11 * scale {
            Ok((f, t))
        } else {
            Err(Error::InversionFailure { point: z.to_vec() })
        }
    }

    pub fn invert(&self, z: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        self.invert_from(z, None)
    }

    /// `c_jk(f) = ω_{σ(f)}(Dσ e_j, Dσ e_k)`.
    pub fn obstruction(&self, f: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.section.point(f)?;
        let d = self.section.jacobian(f)?;
        let omega = self.spec.omega().matrix(z.as_slice())?;
        let c = d.transpose() * omega * d;
        Ok((&c - c.transpose()) * 0.5)
    }

    /// The obstruction as a 2-form on the base.
    pub fn obstruction_form(&self) -> TwoForm {
        let chart = self.clone();
        TwoForm::from_matrix_fn(self.n(), move |f| chart.obstruction(f))
    }
}

// ---------------------------------------------------------------------------
// homotopy operator

/// `(Kα)_x(u) = ∫₀¹ t·α_{c+t(x−c)}(x − c, u) dt` for a closed 2-form `α`.
///
/// On a star-shaped region `d(Kα) = α` and `(Kα)(c) = 0`.
#[derive(Clone)]
pub struct HomotopyPrimitive {
    alpha: TwoForm,
    center: Vec<f64>,
    rule: GaussLegendre,
    check_rule: GaussLegendre,
}

impl fmt::Debug for HomotopyPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HomotopyPrimitive").field("center", &self.center).finish()
    }
}

/// Checks closedness of `alpha` on `grid` and returns its primitive about `center`.
pub fn homotopy_primitive(alpha: &TwoForm, center: &[f64], grid: &[Vec<f64>]) -> Result<HomotopyPrimitive> {
    let report = check_closed(alpha, grid);
    if !report.passed() {
        return Err(Error::NotClosed { residual: report.residual });
    }
    Ok(HomotopyPrimitive::new(alpha, center))
}

impl HomotopyPrimitive {
    /// The operator without the closedness check.
    pub fn new(alpha: &TwoForm, center: &[f64]) -> HomotopyPrimitive {
        HomotopyPrimitive {
            alpha: alpha.clone(),
            center: center.to_vec(),
            rule: GaussLegendre::new(16),
            check_rule: GaussLegendre::new(32),
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    fn integrate(&self, rule: &GaussLegendre, x: &[f64]) -> Result<DVector<f64>> {
        let d = self.alpha.dim();
        let v = DVector::from_iterator(d, x.iter().zip(&self.center).map(|(a, c)| a - c));
        let mut acc = DVector::zeros(d);
        if v.iter().all(|c| *c == 0.0) {
            return Ok(acc);
        }
        let mut y = vec![0.0; d];
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            for i in 0..d {
                y[i] = self.center[i] + t * v[i];
            }
            // α(v, ·) has components (Aᵀ v)_k.
            let a = self.alpha.matrix(&y)?;
            acc += a.tr_mul(&v) * (w * t);
        }
        if acc.iter().all(|c| c.is_finite()) {
            Ok(acc)
        } else {
            Err(Error::QuadratureFailure)
        }
    }

    /// Coefficients of `Kα` at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.integrate(&self.rule, x)
    }

    /// Coefficients and the difference from a rule with twice the nodes.
    pub fn eval_with_error(&self, x: &[f64]) -> Result<(DVector<f64>, f64)> {
        let a = self.integrate(&self.rule, x)?;
        let b = self.integrate(&self.check_rule, x)?;
        let err = (&a - b).amax();
        Ok((a, err))
    }

    pub fn one_form(&self) -> OneForm {
        let k = self.clone();
        OneForm::new(self.alpha.dim(), move |x| k.eval(x))
    }

    /// `max ‖d(Kα) − α‖∞` over `grid`, with `d` by central differences.
    pub fn primitive_residual(&self, grid: &[Vec<f64>]) -> Result<f64> {
        let one = self.one_form();
        let residuals = grid
            .par_iter()
            .map(|x| {
                let d = one.exterior_derivative_fd(x)?;
                let a = self.alpha.matrix(x)?;
                Ok(linalg::max_abs(&(d - a)))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(residuals.into_iter().fold(0.0, f64::max))
    }
}

// ---------------------------------------------------------------------------
// lagrangian correction

/// The angle shift `s = −K(c)` on the base.
#[derive(Debug, Clone)]
pub struct AngleShift {
    n: usize,
    primitive: Option<HomotopyPrimitive>,
}

impl AngleShift {
    pub fn zero(n: usize) -> AngleShift {
        AngleShift { n, primitive: None }
    }

    pub fn is_zero(&self) -> bool {
        self.primitive.is_none()
    }

    pub fn value(&self, f: &[f64]) -> Result<DVector<f64>> {
        match &self.primitive {
            Some(k) => Ok(-k.eval(f)?),
            None => Ok(DVector::zeros(self.n)),
        }
    }

    /// Quadrature error estimate of `s(f)`.
    pub fn quadrature_error(&self, f: &[f64]) -> Result<f64> {
        match &self.primitive {
            Some(k) => Ok(k.eval_with_error(f)?.1),
            None => Ok(0.0),
        }
    }
}

/// Computes the shift that makes the section lagrangian.
pub fn lagrangianize_section(chart: &AdaptedChart) -> Result<AngleShift> {
    let n = chart.n();
    if n == 1 {
        return Ok(AngleShift::zero(1));
    }
    let c = chart.obstruction_form();
    let grid = chart.base().grid(3);
    let peak = grid
        .iter()
        .map(|f| c.upper(f).map(|u| u.iter().fold(0.0_f64, |m, v| m.max(v.abs()))))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(AngleShift::zero(n));
    }
    let k = homotopy_primitive(&c, &chart.base().center, &grid)?;
    Ok(AngleShift { n, primitive: Some(k) })
}

/// Obstruction of `σ'(f) = ρ(−s(f))(σ(f))`, with `Dσ'` by a five-point stencil of step `h`.
pub fn corrected_obstruction(chart: &AdaptedChart, shift: &AngleShift, f: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let shifted = |g: &[f64]| -> Result<DVector<f64>> {
        let s = shift.value(g)?;
        chart.forward(g, (-s).as_slice())
    };
    let z = shifted(f)?;
    let d = fd_jacobian(shifted, f, Stencil::FivePoint(h))?;
    let omega = chart.spec().omega().matrix(z.as_slice())?;
    let c = d.transpose() * omega * d;
    Ok((&c - c.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// canonical chart

/// Settings for [`canonical_coordinates`].
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalParams {
    pub flow: FlowParams,
    /// Lattice search used to size the angle box; `None` treats the orbit as free.
    pub lattice: Option<LatticeSearch>,
    /// Explicit base box half widths; the 10% rule otherwise.
    pub base_half_widths: Option<Vec<f64>>,
    /// Explicit angle box half width; `min(1, 0.45 λ₁/√n)` otherwise.
    pub theta_half_width: Option<f64>,
    /// Five-point stencil step for derivatives through the chart maps.
    pub fd_step: f64,
}

impl Default for CanonicalParams {
    fn default() -> Self {
        CanonicalParams {
            flow: FlowParams::default(),
            lattice: Some(LatticeSearch::default()),
            base_half_widths: None,
            theta_half_width: None,
            fd_step: 1e-3,
        }
    }
}

/// Residuals of a canonical chart over a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartResiduals {
    /// `max |X_j(θ_k) − δ_jk|`.
    pub delta: f64,
    /// `max |(Φ*ω) − J|` entrywise.
    pub darboux: f64,
    /// `max |θ(ρ(t)p) − θ(p) − t|` (mod lattice) and `|F(ρ(t)p) − F(p)|`.
    pub linear: f64,
    pub samples: usize,
}

/// Coordinates `(f, θ)` near a regular orbit with `ω = Σ df_k ∧ dθ_k`.
#[derive(Debug, Clone)]
pub struct CanonicalChart {
    adapted: AdaptedChart,
    shift: AngleShift,
    lattice: Option<OrbitTopology>,
    theta_half_width: f64,
    fd_step: f64,
}

impl CanonicalChart {
    pub fn assemble(adapted: AdaptedChart, shift: AngleShift, lattice: Option<OrbitTopology>, theta_half_width: f64, fd_step: f64) -> CanonicalChart {
        CanonicalChart {
            adapted,
            shift,
            lattice,
            theta_half_width,
            fd_step,
        }
    }

    pub fn adapted(&self) -> &AdaptedChart {
        &self.adapted
    }

    pub fn shift(&self) -> &AngleShift {
        &self.shift
    }

    pub fn lattice(&self) -> Option<&OrbitTopology> {
        self.lattice.as_ref()
    }

    pub fn spec(&self) -> &IntegrableSystemSpec {
        self.adapted.spec()
    }

    pub fn n(&self) -> usize {
        self.adapted.n()
    }

    pub fn base(&self) -> &BaseBox {
        self.adapted.base()
    }

    pub fn theta_half_width(&self) -> f64 {
        self.theta_half_width
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    /// The chart point with coordinates `x = (f, θ)`.
    pub fn point(&self, x: &[f64]) -> Result<DVector<f64>> {
        let n = self.n();
        let (f, theta) = x.split_at(n);
        let s = self.shift.value(f)?;
        let t = DVector::from_column_slice(theta) - s;
        self.adapted.forward(f, t.as_slice())
    }

    /// `(f, θ)` of a chart point.
    pub fn coordinates(&self, z: &[f64]) -> Result<DVector<f64>> {
        let (f, t) = self.adapted.invert(z)?;
        let theta = t + self.shift.value(f.as_slice())?;
        let mut out = DVector::zeros(2 * self.n());
        out.rows_mut(0, self.n()).copy_from(&f);
        out.rows_mut(self.n(), self.n()).copy_from(&theta);
        Ok(out)
    }

    /// `θ(z)`.
    pub fn angles(&self, z: &[f64]) -> Result<DVector<f64>> {
        Ok(self.coordinates(z)?.rows(self.n(), self.n()).into_owned())
    }

    /// `(f, θ) ↦ z` as a map with a five-point finite-difference Jacobian.
    pub fn map(&self) -> ChartMap {
        let chart = self.clone();
        ChartMap::new(2 * self.n(), move |x| chart.point(x)).with_stencil(Stencil::FivePoint(self.fd_step))
    }

    /// Lower/upper corners of the `(f, θ)` box.
    pub fn coordinate_box(&self) -> (Vec<f64>, Vec<f64>) {
        let w = self.theta_half_width;
        let mut lo = self.base().lower();
        let mut hi = self.base().upper();
        lo.extend(vec![-w; self.n()]);
        hi.extend(vec![w; self.n()]);
        (lo, hi)
    }

    /// Uniform samples of the `(f, θ)` box, shrunk by `fraction`.
    pub fn sample_coordinates<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, fraction: f64) -> Vec<Vec<f64>> {
        let (lo, hi) = self.coordinate_box();
        (0..count)
            .map(|_| {
                lo.iter()
                    .zip(&hi)
                    .map(|(a, b)| {
                        let c = 0.5 * (a + b);
                        let h = 0.5 * (b - a) * fraction;
                        c + h * rng.random_range(-1.0..=1.0)
                    })
                    .collect()
            })
            .collect()
    }

    /// `max_{j,k} |X_j(θ_k) − δ_jk|` at a chart point, differentiating `θ`
    /// along straight lines in the direction of `X_j`.
    pub fn delta_at(&self, z: &[f64]) -> Result<f64> {
        let n = self.n();
        let zv = DVector::from_column_slice(z);
        let mut worst = 0.0_f64;
        for j in 0..n {
            let x = self.spec().field(j, z)?;
            let h = self.fd_step / x.norm().max(1e-300);
            let at = |s: f64| self.angles((&zv + &x * s).as_slice());
            let d = ((at(h)? - at(-h)?) * 8.0 - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            for k in 0..n {
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((d[k] - target).abs());
            }
        }
        Ok(worst)
    }

    /// `max |J_Mᵀ Ω J_M − J|` at chart coordinates `x = (f, θ)`.
    pub fn darboux_at(&self, x: &[f64]) -> Result<f64> {
        let map = self.map();
        let z = map.apply(x)?;
        let jm = map.jacobian(x)?;
        let omega = self.spec().omega().matrix(z.as_slice())?;
        let pulled = jm.transpose() * omega * &jm;
        Ok(linalg::max_abs(&(pulled - linalg::standard_block(self.n()))))
    }

    /// `|θ(ρ(t)z) − θ(z) − t|` reduced mod the lattice, together with the drift of `f`.
    pub fn linear_at(&self, z: &[f64], t: &[f64], params: &FlowParams) -> Result<f64> {
        let n = self.n();
        let before = self.coordinates(z)?;
        let moved = joint_action(self.spec(), t, z, params)?;
        let after = self.coordinates(moved.as_slice())?;
        let df = (after.rows(0, n) - before.rows(0, n)).amax();
        let mut d = after.rows(n, n) - before.rows(n, n) - DVector::from_column_slice(t);
        if let Some(topo) = self.lattice.as_ref().filter(|l| l.m > 0) {
            let basis = DMatrix::from_columns(&topo.lattice_basis);
            let coef = linalg::least_squares(&basis, &d);
            d -= basis * coef.map(|c| c.round());
        }
        Ok(df.max(d.amax()))
    }

    /// Residuals over `samples` coordinate points; the linearity check flows each one by `times[i]`.
    pub fn residuals(&self, samples: &[Vec<f64>], times: &[Vec<f64>], params: &FlowParams) -> Result<ChartResiduals> {
        let rows = samples
            .par_iter()
            .zip(times.par_iter())
            .map(|(x, t)| {
                let z = self.point(x)?;
                Ok((self.delta_at(z.as_slice())?, self.darboux_at(x)?, self.linear_at(z.as_slice(), t, params)?))
            })
            .collect::<Result<Vec<(f64, f64, f64)>>>()?;
        let fold = |k: fn(&(f64, f64, f64)) -> f64| rows.iter().map(k).fold(0.0, f64::max);
        Ok(ChartResiduals {
            delta: fold(|r| r.0),
            darboux: fold(|r| r.1),
            linear: fold(|r| r.2),
            samples: rows.len(),
        })
    }
}

/// `max` over `grid` (chart coordinates) of the entrywise deviation of the
/// pulled-back form from the standard block.
pub fn darboux_residual(chart: &CanonicalChart, grid: &[Vec<f64>]) -> Result<f64> {
    let values = grid.par_iter().map(|x| chart.darboux_at(x)).collect::<Result<Vec<f64>>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Builds canonical coordinates near the orbit of `p0`.
pub fn canonical_coordinates(spec: &IntegrableSystemSpec, p0: &[f64], params: &CanonicalParams) -> Result<CanonicalChart> {
    let n = spec.n();
    let section: Arc<dyn Section> = Arc::new(build_section(spec, p0)?);
    let lattice = match &params.lattice {
        Some(search) => Some(detect_period_lattice(spec, p0, &params.flow, search)?),
        None => None,
    };
    let mut theta = params.theta_half_width.unwrap_or_else(|| {
        let shortest = lattice
            .as_ref()
            .and_then(|l| l.lattice_basis.iter().map(|b| b.norm()).reduce(f64::min))
            .unwrap_or(f64::INFINITY);
        (0.45 * shortest / (n as f64).sqrt()).min(1.0)
    });
    let f0 = spec.values(p0)?;
    let mut base = match &params.base_half_widths {
        Some(w) => BaseBox {
            center: f0.as_slice().to_vec(),
            half_widths: w.clone(),
        },
        None => BaseBox::around(f0.as_slice()),
    };
    loop {
        let error = match try_assemble(spec, p0, section.clone(), &base, theta, lattice.clone(), params) {
            Ok(chart) => return Ok(chart),
            Err(e @ (Error::NotClosed { .. } | Error::NotRegular { .. } | Error::SingularForm { .. })) => return Err(e),
            Err(e) => e,
        };
        let next = base.halved();
        if next.half_widths.iter().any(|w| *w < SHRINK_FLOOR) || theta * 0.5 < SHRINK_FLOOR {
            return Err(error);
        }
        base = next;
        theta *= 0.5;
    }
}

fn try_assemble(
    spec: &IntegrableSystemSpec,
    p0: &[f64],
    section: Arc<dyn Section>,
    base: &BaseBox,
    theta: f64,
    lattice: Option<OrbitTopology>,
    params: &CanonicalParams,
) -> Result<CanonicalChart> {
    // The section must exist over the whole base box.
    for f in base.grid(2) {
        section.point(&f)?;
    }
    let steps = pilot_steps(spec, p0, 1.5 * theta + 1e-3)?;
    let adapted = AdaptedChart::new(spec, p0, section, base.clone(), steps);
    let shift = lagrangianize_section(&adapted)?;
    let chart = CanonicalChart::assemble(adapted, shift, lattice, theta, params.fd_step);
    // Corners of the coordinate box must map into the chart and invert back.
    let (lo, hi) = chart.coordinate_box();
    for x in tensor_grid(&lo, &hi, 2) {
        let z = chart.point(&x)?;
        let back = chart.coordinates(z.as_slice())?;
        let err = (back - DVector::from_column_slice(&x)).amax();
        if err > 1e-9 {
            return Err(Error::InversionFailure { point: z.as_slice().to_vec() });
        }
    }
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;
    use crate::systems::lookup;

    #[test]
    fn oscillator_section_is_the_positive_ray() {
        let sys = lookup("harmonic_oscillator").unwrap();
        let s = build_section(&sys.spec, &[1.0, 0.0]).unwrap();
        for h in [0.45, 0.5, 0.55] {
            let z = s.point(&[h]).unwrap();
            assert!((z[0] - (2.0 * h).sqrt()).abs() < 1e-10 && z[1].abs() < 1e-14);
        }
        assert_eq!(s.point(&[0.5]).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn primitive_of_constant_form() {
        // α = df∧dy on ℝ², c = 0 → Kα = ½(f dy − y df).
        let alpha = TwoForm::constant(&linalg::standard_block(1));
        let k = HomotopyPrimitive::new(&alpha, &[0.0, 0.0]);
        let v = k.eval(&[0.6, -0.8]).unwrap();
        assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.3).abs() < 1e-15);
        assert_eq!(k.eval(&[0.0, 0.0]).unwrap(), DVector::zeros(2));
        assert_eq!(HomotopyPrimitive::new(&TwoForm::zero(2), &[0.0, 0.0]).eval(&[1.0, 2.0]).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn primitive_rejects_open_forms() {
        let e = |s| Expression::parse(s, 2).unwrap();
        let broken = TwoForm::from_expressions(2, &[((0, 2), e("1")), ((1, 3), e("1+q1"))]).unwrap();
        let grid = tensor_grid(&[-1.0; 4], &[1.0; 4], 2);
        assert!(matches!(homotopy_primitive(&broken, &[0.0; 4], &grid), Err(Error::NotClosed { .. })));
    }

    #[test]
    fn base_box_rule() {
        let b = BaseBox::around(&[0.5, 0.0, -2.0]);
        assert_eq!(b.half_widths, vec![0.05, 0.1, 0.2]);
    }
}
