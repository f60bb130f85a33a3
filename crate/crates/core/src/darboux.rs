//! Darboux coordinates from a free commuting Hamiltonian family.
//!
//! The family starts from a seed function and grows one member at a time.
//! Each step rectifies the current fields in a flow box
//! `Ψ(x, y) = φ_y(u₀ + W x)` and takes a transversal coordinate `x_a` as the
//! next member. It is constant along the flows, so it commutes with the family.
//! The flows preserve ω, hence `Ψ*ω = Bᵀ Ω B` with `B = [W | X(u₀ + W x)]`
//! does not depend on `y` and is known without integrating; the next step
//! works in these coordinates. With `n` members the canonical chart of
//! [`crate::foliation`] is built on the last level and composed with the boxes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::expr::Expression;
use crate::flows::{FlowParams, IntegrableSystemSpec};
use crate::foliation::{canonical_coordinates, CanonicalChart, CanonicalParams};
use crate::geometry::{
    check_closed, check_nondegenerate, fd_jacobian, tensor_grid, ChartDomain, ChartMap, ScalarField, Stencil,
    SymplecticStructure, TwoForm, VectorField,
};
use crate::linalg;
use crate::ode::{self, Dop853, OdeOptions};
use crate::tolerances::{
    NONDEGENERACY_FLOOR, RANK_FLOOR, SEED_FLOOR, SHRINK_FLOOR, TOL_CERTIFY, TOL_COMMUTE_FLOW, TOL_DARBOUX, TOL_RECTIFY,
};

/// `(z_i − p_i + 1)²` for the first coordinate whose Hamiltonian field at `p`
/// has norm at least the seed floor, or the best coordinate if none does.
pub fn seed_hamiltonian(omega: &SymplecticStructure, p: &[f64]) -> Result<ScalarField> {
    let det = omega.matrix(p)?.determinant();
    if !(det.abs() >= NONDEGENERACY_FLOOR) {
        return Err(Error::SingularForm { point: p.to_vec(), det });
    }
    let n = omega.chart().n();
    let candidate = |i: usize| -> Result<(ScalarField, f64)> {
        let e = (Expression::variable(n, i) + Expression::constant(n, 1.0 - p[i])).powf(2.0);
        let f = ScalarField::from_expression(e);
        let norm = omega.hamiltonian_vector_field(&f, p)?.norm();
        Ok((f, norm))
    };
    let first = candidate(0)?;
    if first.1 >= SEED_FLOOR {
        return Ok(first.0);
    }
    let mut best = first;
    for i in 1..2 * n {
        let c = candidate(i)?;
        if c.1 > best.1 {
            best = c;
        }
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// flow boxes

/// `Ψ(x, y) = φ_y(u₀ + W x)`, the unit-time flow of `Σ y_i X_i` from the
/// transversal `u₀ + span W`. In these coordinates `X_i = ∂/∂y_i`.
#[derive(Clone)]
pub struct FlowBoxChart {
    fields: Vec<VectorField>,
    origin: DVector<f64>,
    transversal: DMatrix<f64>,
    normal: DMatrix<f64>,
    steps: usize,
    reach: f64,
    fd_step: f64,
    rectification: f64,
}

impl fmt::Debug for FlowBoxChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlowBoxChart")
            .field("origin", &self.origin.as_slice())
            .field("k", &self.fields.len())
            .field("steps", &self.steps)
            .field("reach", &self.reach)
            .field("rectification", &self.rectification)
            .finish()
    }
}

/// Rectifies `k` commuting fields near `p` on the cube of half width `reach`.
pub fn flow_box(fields: &[VectorField], p: &[f64], reach: f64, fd_step: f64) -> Result<FlowBoxChart> {
    let dim = p.len();
    let k = fields.len();
    if k == 0 || k > dim || fields.iter().any(|f| f.dim() != dim) {
        return Err(Error::InvalidInput(format!("flow box of {k} fields in dimension {dim}")));
    }
    let cols = fields.iter().map(|f| f.eval(p)).collect::<Result<Vec<_>>>()?;
    let x0 = DMatrix::from_columns(&cols);
    let sigma_min = linalg::sigma_min(&x0);
    if !(sigma_min >= RANK_FLOOR) {
        return Err(Error::RankDeficient { sigma_min });
    }
    let residual = flow_commutation(fields, p, 0.5 * reach)?;
    if residual > TOL_COMMUTE_FLOW {
        return Err(Error::NotCommuting { residual });
    }
    let transversal = linalg::orthogonal_complement(&x0);
    let normal = DMatrix::from_columns(&linalg::orthonormal_basis(&x0, 0.0));
    let mut chart = FlowBoxChart {
        fields: fields.to_vec(),
        origin: DVector::from_column_slice(p),
        transversal,
        normal,
        steps: 0,
        reach,
        fd_step,
        rectification: f64::NAN,
    };
    chart.steps = chart.pilot_steps()?;
    chart.rectification = chart.rectification_residual(&chart.check_points())?;
    Ok(chart)
}

/// `max_{i<j} |φ^i_s φ^j_s(p) − φ^j_s φ^i_s(p)|`.
fn flow_commutation(fields: &[VectorField], p: &[f64], s: f64) -> Result<f64> {
    let opts = OdeOptions::default();
    let flow = |i: usize, z: &[f64]| ode::integrate(|u: &[f64]| fields[i].eval(u), z, s, opts, &|_| true);
    let mut worst = 0.0_f64;
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            let a = flow(i, flow(j, p)?.as_slice())?;
            let b = flow(j, flow(i, p)?.as_slice())?;
            worst = worst.max((a - b).amax());
        }
    }
    Ok(worst)
}

impl FlowBoxChart {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// Number of rectified fields.
    pub fn k(&self) -> usize {
        self.fields.len()
    }

    pub fn origin(&self) -> &DVector<f64> {
        &self.origin
    }

    /// `W`, orthonormal and orthogonal to the fields at the origin.
    pub fn transversal(&self) -> &DMatrix<f64> {
        &self.transversal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// Rectification residual measured at construction.
    pub fn rectification(&self) -> f64 {
        self.rectification
    }

    fn combined(&self, y: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.dim());
        for (f, &c) in self.fields.iter().zip(y) {
            if c != 0.0 {
                v += f.eval(z)? * c;
            }
        }
        Ok(v)
    }

    fn pilot_steps(&self) -> Result<usize> {
        let y = vec![self.reach; self.k()];
        let opts = OdeOptions {
            rtol: 1e-13,
            atol: 1e-13,
            ..OdeOptions::default()
        };
        let mut solver = Dop853::new(|z: &[f64]| self.combined(&y, z), self.origin.clone(), opts)?;
        match solver.advance_to(1.0, &|_| true) {
            Ok(()) | Err(Error::LeftDomain { .. }) => {}
            Err(e) => return Err(e),
        }
        Ok((2 * solver.accepted_steps() + 4).max(8))
    }

    /// `φ_y(z)` with the chart's fixed step count.
    pub fn flow(&self, y: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        if y.iter().all(|c| *c == 0.0) {
            return Ok(DVector::from_column_slice(z));
        }
        ode::integrate_fixed(|u: &[f64]| self.combined(y, u), z, 1.0, self.steps)
    }

    /// `Ψ(x, y)` for `xy = (x, y)`.
    pub fn forward(&self, xy: &[f64]) -> Result<DVector<f64>> {
        let (x, y) = xy.split_at(self.dim() - self.k());
        let start = &self.origin + &self.transversal * DVector::from_column_slice(x);
        self.flow(y, start.as_slice())
    }

    /// `(x, y)` with `Ψ(x, y) = u`: Newton on `y` for `φ_{−y}(u) ∈ u₀ + span W`.
    pub fn inverse(&self, u: &[f64]) -> Result<DVector<f64>> {
        let uv = DVector::from_column_slice(u);
        let nt = self.normal.transpose();
        let x0 = self.fields_at(self.origin.as_slice())?;
        let mut y = linalg::solve(&(&nt * &x0), &(&nt * (&uv - &self.origin)))
            .ok_or_else(|| Error::InversionFailure { point: u.to_vec() })?;
        let scale = 1.0 + uv.amax();
        let mut best = f64::INFINITY;
        let mut v = uv.clone();
        for _ in 0..40 {
            let back = -&y;
            v = self.flow(back.as_slice(), u)?;
            let g = &nt * (&v - &self.origin);
            best = best.min(g.amax());
            if g.amax() <= 1e-14 * scale {
                break;
            }
            let jac = -(&nt * self.fields_at(v.as_slice())?);
            let Some(dy) = linalg::solve(&jac, &g) else { break };
            y -= &dy;
            if dy.amax() <= 1e-16 * (1.0 + y.amax()) {
                break;
            }
        }
        if !(best <= 1e-11 * scale) {
            return Err(Error::InversionFailure { point: u.to_vec() });
        }
        let x = self.transversal.transpose() * (v - &self.origin);
        Ok(DVector::from_iterator(self.dim(), x.iter().chain(y.iter()).copied()))
    }

    fn fields_at(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let cols = self.fields.iter().map(|f| f.eval(z)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// `DΨ` by the five-point stencil.
    pub fn jacobian(&self, xy: &[f64]) -> Result<DMatrix<f64>> {
        fd_jacobian(|v| self.forward(v), xy, Stencil::FivePoint(self.fd_step))
    }

    /// `DΨ(0) = [W | X(u₀)]`, exact.
    pub fn origin_jacobian(&self) -> Result<DMatrix<f64>> {
        let mut b = DMatrix::zeros(self.dim(), self.dim());
        let m = self.dim() - self.k();
        b.columns_mut(0, m).copy_from(&self.transversal);
        b.columns_mut(m, self.k()).copy_from(&self.fields_at(self.origin.as_slice())?);
        Ok(b)
    }

    /// The origin and the corners of the half-reach cube.
    pub fn check_points(&self) -> Vec<Vec<f64>> {
        let h = 0.5 * self.reach;
        let mut points = tensor_grid(&vec![-h; self.dim()], &vec![h; self.dim()], 2);
        points.push(vec![0.0; self.dim()]);
        points
    }

    /// `max |DΨ⁻¹ X_i(Ψ) − e_{2n−k+i}|` over box coordinates.
    pub fn rectification_residual(&self, samples: &[Vec<f64>]) -> Result<f64> {
        let m = self.dim() - self.k();
        let values = samples
            .par_iter()
            .map(|xy| {
                let z = self.forward(xy)?;
                let lu = self.jacobian(xy)?.lu();
                let mut worst = 0.0_f64;
                for (i, f) in self.fields.iter().enumerate() {
                    let v = lu.solve(&f.eval(z.as_slice())?).ok_or(Error::RankDeficient { sigma_min: 0.0 })?;
                    for (r, c) in v.iter().enumerate() {
                        let target = if r == m + i { 1.0 } else { 0.0 };
                        worst = worst.max((c - target).abs());
                    }
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(values.into_iter().fold(0.0, f64::max))
    }
}

/// Maps coordinates of the last box's level down to the original chart.
fn lift(boxes: &[Arc<FlowBoxChart>], u: &[f64]) -> Result<DVector<f64>> {
    let mut z = DVector::from_column_slice(u);
    for b in boxes.iter().rev() {
        z = b.forward(z.as_slice())?;
    }
    Ok(z)
}

/// `[z, Ψ₁⁻¹ z, Ψ₂⁻¹ Ψ₁⁻¹ z, …]`.
fn descend(boxes: &[Arc<FlowBoxChart>], z: &[f64]) -> Result<Vec<DVector<f64>>> {
    let mut points = vec![DVector::from_column_slice(z)];
    for b in boxes {
        let next = b.inverse(points.last().expect("nonempty").as_slice())?;
        points.push(next);
    }
    Ok(points)
}

/// `g ∘ (Ψ₁ ∘ … ∘ Ψ_L)⁻¹`, with gradient `J⁻ᵀ ∇g` for the chain Jacobian `J`.
fn pull_back(g: ScalarField, boxes: &[Arc<FlowBoxChart>]) -> ScalarField {
    let dim = g.dim();
    let (gv, gg) = (g.clone(), g);
    let (bv, bg) = (boxes.to_vec(), boxes.to_vec());
    ScalarField::with_gradient(
        dim,
        move |z| {
            let points = descend(&bv, z)?;
            gv.value(points.last().expect("nonempty").as_slice())
        },
        move |z| {
            let points = descend(&bg, z)?;
            let mut j = DMatrix::identity(dim, dim);
            for (b, u) in bg.iter().zip(&points[1..]) {
                j *= b.jacobian(u.as_slice())?;
            }
            let grad = gg.gradient(points.last().expect("nonempty").as_slice())?;
            linalg::solve(&j.transpose(), &grad).ok_or_else(|| Error::InversionFailure { point: z.to_vec() })
        },
    )
}

// ---------------------------------------------------------------------------
// commuting families

/// Bracket and rank certificate of a [`CommutingFamily`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyCertificate {
    /// `max |{f_i, f_j}|` over the cloud.
    pub max_bracket: f64,
    /// Smallest singular value of `[X_1 … X_k]` at the base point.
    pub sigma_min: f64,
    pub samples: usize,
    /// Half width of the cloud around the base point.
    pub radius: f64,
}

impl FamilyCertificate {
    pub fn passed(&self) -> bool {
        self.max_bracket <= TOL_CERTIFY && self.sigma_min >= RANK_FLOOR
    }
}

/// Functions `f_1 … f_k` near a point with pairwise vanishing brackets and independent fields.
#[derive(Debug, Clone)]
pub struct CommutingFamily {
    omega: SymplecticStructure,
    base_point: DVector<f64>,
    functions: Vec<ScalarField>,
    certificate: FamilyCertificate,
}

impl CommutingFamily {
    /// Measures brackets on `samples` uniform points of the cube of half
    /// width `radius` about `p`, keeping those inside the chart.
    pub fn certify(
        omega: &SymplecticStructure,
        p: &[f64],
        functions: Vec<ScalarField>,
        radius: f64,
        samples: usize,
        seed: u64,
    ) -> Result<CommutingFamily> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud: Vec<Vec<f64>> = (0..samples)
            .map(|_| p.iter().map(|c| c + radius * rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>())
            .filter(|z| omega.chart().contains(z))
            .collect();
        let brackets = cloud
            .par_iter()
            .map(|z| {
                let grads = functions.iter().map(|f| f.gradient(z)).collect::<Result<Vec<_>>>()?;
                let mut worst = 0.0_f64;
                for (i, gi) in grads.iter().enumerate() {
                    let xi = omega.solve_hamiltonian(z, gi)?;
                    for gj in &grads[i + 1..] {
                        worst = worst.max(gj.dot(&xi).abs());
                    }
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?;
        let family = CommutingFamily {
            omega: omega.clone(),
            base_point: DVector::from_column_slice(p),
            certificate: FamilyCertificate {
                max_bracket: brackets.into_iter().fold(0.0, f64::max),
                sigma_min: 0.0,
                samples: cloud.len(),
                radius,
            },
            functions,
        };
        let sigma_min = linalg::sigma_min(&family.fields(p)?);
        Ok(CommutingFamily {
            certificate: FamilyCertificate {
                sigma_min,
                ..family.certificate
            },
            ..family
        })
    }

    pub fn omega(&self) -> &SymplecticStructure {
        &self.omega
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.base_point
    }

    pub fn functions(&self) -> &[ScalarField] {
        &self.functions
    }

    pub fn certificate(&self) -> &FamilyCertificate {
        &self.certificate
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// `[X_1 … X_k]` at `z`.
    pub fn fields(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let cols = self
            .functions
            .iter()
            .map(|f| self.omega.hamiltonian_vector_field(f, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// The family as an integrable system, once it has `n` members.
    pub fn to_spec(&self) -> Result<IntegrableSystemSpec> {
        IntegrableSystemSpec::new(self.omega.clone(), self.functions.clone())
    }
}

/// One extension step, expressed in the coordinates of the new flow box.
struct Level {
    flow_box: Arc<FlowBoxChart>,
    omega: SymplecticStructure,
    family: Vec<ScalarField>,
    /// Transversal coordinate taken as the new member.
    index: usize,
}

fn extend_level(omega: &SymplecticStructure, family: &[ScalarField], p: &[f64], radius: f64, fd_step: f64) -> Result<Level> {
    let dim = omega.dim();
    let k = family.len();
    let fields: Vec<VectorField> = family.iter().map(|f| omega.vector_field(f)).collect();
    let flow_box = Arc::new(flow_box(&fields, p, radius, fd_step)?);
    let b0 = flow_box.origin_jacobian()?;
    let b0_inv = b0.clone().try_inverse().ok_or(Error::RankDeficient { sigma_min: 0.0 })?;
    let existing = b0.columns(dim - k, k).into_owned();
    let scores = (0..dim - k)
        .into_par_iter()
        .map(|a| {
            let grad = b0_inv.row(a).transpose();
            let x = omega.solve_hamiltonian(p, &grad)?;
            let mut m = existing.clone().insert_column(k, 0.0);
            m.set_column(k, &x);
            Ok(linalg::sigma_min(&m))
        })
        .collect::<Result<Vec<f64>>>()?;
    // Ties go to the lowest index.
    let (index, best) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
    if !(best >= RANK_FLOOR) {
        return Err(Error::NoIndependentCandidate);
    }

    let n = omega.chart().n();
    let w = flow_box.transversal().clone();
    let origin = flow_box.origin().clone();
    let form = {
        let omega = omega.clone();
        let fields = fields.clone();
        let (w, origin) = (w.clone(), origin.clone());
        TwoForm::from_matrix_fn(dim, move |xy| {
            let z = &origin + &w * DVector::from_column_slice(&xy[..dim - k]);
            let m = omega.matrix(z.as_slice())?;
            let mut b = DMatrix::zeros(dim, dim);
            b.columns_mut(0, dim - k).copy_from(&w);
            for (i, f) in fields.iter().enumerate() {
                b.set_column(dim - k + i, &f.eval(z.as_slice())?);
            }
            Ok(b.transpose() * m * b)
        })
    };
    let level_omega = SymplecticStructure::new(ChartDomain::cube(n, radius), form)?;
    let mut section = DMatrix::zeros(dim, dim);
    section.columns_mut(0, dim - k).copy_from(&w);
    let mut level_family: Vec<ScalarField> = family
        .iter()
        .map(|f| f.compose_affine(origin.clone(), section.clone()))
        .collect();
    level_family.push(ScalarField::coordinate(dim, index));
    Ok(Level {
        flow_box,
        omega: level_omega,
        family: level_family,
        index,
    })
}

/// Settings for [`darboux_chart`] and [`extend_commuting_family`].
#[derive(Debug, Clone, PartialEq)]
pub struct DarbouxParams {
    /// Half width of the first flow box, in its own coordinates.
    pub radius: f64,
    /// Half width of the base box of the final canonical chart.
    pub base_half_width: f64,
    /// Half width of the angle box of the final canonical chart.
    pub theta_half_width: f64,
    /// Size of the bracket certification cloud.
    pub samples: usize,
    /// Number of chart points at which the final residual is measured.
    pub validation_samples: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub flow: FlowParams,
}

impl Default for DarbouxParams {
    fn default() -> Self {
        DarbouxParams {
            radius: 0.5,
            base_half_width: 0.1,
            theta_half_width: 0.1,
            samples: 100,
            validation_samples: 64,
            seed: 42,
            fd_step: 1e-3,
            flow: FlowParams::default(),
        }
    }
}

impl DarbouxParams {
    /// The same settings with every neighbourhood scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> DarbouxParams {
        DarbouxParams {
            radius: self.radius * factor,
            base_half_width: self.base_half_width * factor,
            theta_half_width: self.theta_half_width * factor,
            ..self.clone()
        }
    }

    fn cloud_radius(&self) -> f64 {
        0.25 * self.radius
    }
}

/// The seed as a one-member family.
pub fn seed_family(omega: &SymplecticStructure, p: &[f64], params: &DarbouxParams) -> Result<CommutingFamily> {
    let seed = seed_hamiltonian(omega, p)?;
    CommutingFamily::certify(omega, p, vec![seed], params.cloud_radius(), params.samples, params.seed)
}

/// Adds the transversal coordinate of the family's flow box that keeps the
/// fields most independent, pulled back to the family's coordinates.
pub fn extend_commuting_family(family: &CommutingFamily, params: &DarbouxParams) -> Result<CommutingFamily> {
    let omega = family.omega();
    if family.len() >= omega.chart().n() {
        return Err(Error::InvalidInput(format!("family already has {} members", family.len())));
    }
    let p = family.base_point().as_slice();
    let level = extend_level(omega, family.functions(), p, params.radius, params.fd_step)?;
    if level.flow_box.rectification() > TOL_RECTIFY {
        return Err(Error::ResidualExceeded {
            what: "rectification",
            value: level.flow_box.rectification(),
            tolerance: TOL_RECTIFY,
        });
    }
    let mut functions = family.functions().to_vec();
    functions.push(pull_back(ScalarField::coordinate(omega.dim(), level.index), &[level.flow_box]));
    let extended = CommutingFamily::certify(omega, p, functions, params.cloud_radius(), params.samples, params.seed)?;
    check_certificate(&extended)?;
    Ok(extended)
}

fn check_certificate(family: &CommutingFamily) -> Result<()> {
    let c = family.certificate();
    if !(c.sigma_min >= RANK_FLOOR) {
        return Err(Error::RankDeficient { sigma_min: c.sigma_min });
    }
    if !(c.max_bracket <= TOL_CERTIFY) {
        return Err(Error::ResidualExceeded {
            what: "bracket certification",
            value: c.max_bracket,
            tolerance: TOL_CERTIFY,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Darboux charts

/// Coordinates `(f, θ)` near a point with `ω = Σ df_k ∧ dθ_k`: a canonical
/// chart on the last flow-box level, composed with the flow boxes.
#[derive(Debug, Clone)]
pub struct DarbouxChart {
    omega: SymplecticStructure,
    base_point: DVector<f64>,
    boxes: Vec<Arc<FlowBoxChart>>,
    family: CommutingFamily,
    canonical: CanonicalChart,
    radius: f64,
    residual: f64,
}

impl DarbouxChart {
    pub fn n(&self) -> usize {
        self.canonical.n()
    }

    pub fn omega(&self) -> &SymplecticStructure {
        &self.omega
    }

    pub fn base_point(&self) -> &DVector<f64> {
        &self.base_point
    }

    /// Flow boxes, outermost first.
    pub fn flow_boxes(&self) -> &[Arc<FlowBoxChart>] {
        &self.boxes
    }

    /// The constructed family in the original coordinates.
    pub fn family(&self) -> &CommutingFamily {
        &self.family
    }

    /// The canonical chart on the last level.
    pub fn canonical(&self) -> &CanonicalChart {
        &self.canonical
    }

    /// Radius of the first flow box after shrinking.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Largest residual seen on the validation samples.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// The point with coordinates `x = (f, θ)`.
    pub fn point(&self, x: &[f64]) -> Result<DVector<f64>> {
        let u = self.canonical.point(x)?;
        lift(&self.boxes, u.as_slice())
    }

    /// `(f, θ)` of a point.
    pub fn coordinates(&self, z: &[f64]) -> Result<DVector<f64>> {
        let points = descend(&self.boxes, z)?;
        self.canonical.coordinates(points.last().expect("nonempty").as_slice())
    }

    pub fn map(&self) -> ChartMap {
        let chart = self.clone();
        ChartMap::new(self.omega.dim(), move |x| chart.point(x)).with_stencil(Stencil::FivePoint(self.canonical.fd_step()))
    }

    pub fn coordinate_box(&self) -> (Vec<f64>, Vec<f64>) {
        self.canonical.coordinate_box()
    }

    pub fn sample_coordinates<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, fraction: f64) -> Vec<Vec<f64>> {
        self.canonical.sample_coordinates(rng, count, fraction)
    }

    /// `max |J_Mᵀ Ω J_M − J|` at `x`.
    pub fn darboux_at(&self, x: &[f64]) -> Result<f64> {
        let map = self.map();
        let z = map.apply(x)?;
        let jm = map.jacobian(x)?;
        let pulled = jm.transpose() * self.omega.matrix(z.as_slice())? * &jm;
        Ok(linalg::max_abs(&(pulled - linalg::standard_block(self.n()))))
    }

    /// `max` of [`DarbouxChart::darboux_at`] over `grid`.
    pub fn residual_on(&self, grid: &[Vec<f64>]) -> Result<f64> {
        let values = grid.par_iter().map(|x| self.darboux_at(x)).collect::<Result<Vec<f64>>>()?;
        Ok(values.into_iter().fold(0.0, f64::max))
    }
}

/// Darboux coordinates near `p`.
///
/// Runs seed, extension to `n` members and the canonical chart, then checks
/// the pulled-back form on random chart points. Failures other than an open
/// or degenerate form halve every neighbourhood and retry down to the floor.
pub fn darboux_chart(omega: &SymplecticStructure, p: &[f64], params: &DarbouxParams) -> Result<DarbouxChart> {
    check_input(omega, p, params.radius).stage("input")?;
    let mut current = params.clone();
    loop {
        let error = match attempt(omega, p, &current) {
            Ok(chart) => return Ok(chart),
            Err(e) => e,
        };
        if matches!(error.root(), Error::NotClosed { .. } | Error::InvalidInput(_)) {
            return Err(error);
        }
        current = current.scaled(0.5);
        if current.radius < SHRINK_FLOOR {
            return Err(error);
        }
    }
}

fn check_input(omega: &SymplecticStructure, p: &[f64], radius: f64) -> Result<()> {
    omega.chart().check(p)?;
    let h = 0.5 * radius;
    let lower: Vec<f64> = p.iter().map(|c| c - h).collect();
    let upper: Vec<f64> = p.iter().map(|c| c + h).collect();
    let grid: Vec<Vec<f64>> = tensor_grid(&lower, &upper, 3)
        .into_iter()
        .filter(|z| omega.chart().contains(z))
        .collect();
    let closed = check_closed(omega.form(), &grid);
    if !closed.passed() {
        return Err(Error::NotClosed { residual: closed.residual });
    }
    let nondegenerate = check_nondegenerate(omega.form(), &grid);
    if let Some(point) = nondegenerate.degenerate_points.first() {
        let det = omega.form().matrix(point).map(|m| m.determinant()).unwrap_or(f64::NAN);
        return Err(Error::SingularForm { point: point.clone(), det });
    }
    Ok(())
}

fn attempt(omega: &SymplecticStructure, p: &[f64], params: &DarbouxParams) -> Result<DarbouxChart> {
    let n = omega.chart().n();
    let dim = 2 * n;
    let seed = seed_hamiltonian(omega, p).stage("seed")?;

    let mut boxes: Vec<Arc<FlowBoxChart>> = Vec::new();
    let mut original = vec![seed.clone()];
    let mut level_omega = omega.clone();
    let mut level_family = vec![seed];
    let mut point = p.to_vec();
    let mut radius = params.radius;
    while level_family.len() < n {
        let level = extend_level(&level_omega, &level_family, &point, radius, params.fd_step).stage("extend")?;
        if level.flow_box.rectification() > TOL_RECTIFY {
            return Err(Error::ResidualExceeded {
                what: "rectification",
                value: level.flow_box.rectification(),
                tolerance: TOL_RECTIFY,
            })
            .stage("flow box");
        }
        boxes.push(level.flow_box);
        original.push(pull_back(ScalarField::coordinate(dim, level.index), &boxes));
        level_omega = level.omega;
        level_family = level.family;
        point = vec![0.0; dim];
        // Keeps the next transversal `u₀ + W x` inside this level's cube.
        radius /= (dim as f64).sqrt();
    }

    let family = CommutingFamily::certify(omega, p, original, params.cloud_radius(), params.samples, params.seed).stage("certify")?;
    check_certificate(&family).stage("certify")?;

    let spec = IntegrableSystemSpec::new(level_omega, level_family).stage("canonical")?;
    let canonical_params = CanonicalParams {
        flow: params.flow,
        lattice: None,
        base_half_widths: Some(vec![params.base_half_width; n]),
        theta_half_width: Some(params.theta_half_width),
        fd_step: params.fd_step,
    };
    let canonical = canonical_coordinates(&spec, &point, &canonical_params).stage("canonical")?;
    let mut chart = DarbouxChart {
        omega: omega.clone(),
        base_point: DVector::from_column_slice(p),
        boxes,
        family,
        canonical,
        radius: params.radius,
        residual: f64::NAN,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let samples = chart.sample_coordinates(&mut rng, params.validation_samples, 1.0);
    let residual = chart.residual_on(&samples).stage("residual")?;
    if !(residual <= TOL_DARBOUX) {
        return Err(Error::ResidualExceeded {
            what: "darboux",
            value: residual,
            tolerance: TOL_DARBOUX,
        })
        .stage("residual");
    }
    chart.residual = residual;
    Ok(chart)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_on_standard_plane() {
        let omega = SymplecticStructure::standard(ChartDomain::cube(1, 2.0));
        let f = seed_hamiltonian(&omega, &[0.0, 0.0]).unwrap();
        let x = omega.hamiltonian_vector_field(&f, &[0.0, 0.0]).unwrap();
        assert_eq!(x.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn constant_field_box_is_a_translation() {
        let x = VectorField::constant(DVector::from_vec(vec![1.0, 0.0]));
        let b = flow_box(&[x], &[0.2, 0.3], 0.5, 1e-3).unwrap();
        // W = ±e_p, so Ψ(x, y) = (0.2 + y, 0.3 ± x).
        let z = b.forward(&[0.1, 0.25]).unwrap();
        assert!((z[0] - 0.45).abs() < 1e-15 && ((z[1] - 0.3).abs() - 0.1).abs() < 1e-15);
        let back = b.inverse(z.as_slice()).unwrap();
        assert!((back - DVector::from_vec(vec![0.1, 0.25])).amax() < 1e-14);
        assert!(b.rectification() < 1e-10);
    }

    #[test]
    fn parallel_fields_are_rejected() {
        let x = VectorField::constant(DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]));
        let err = flow_box(&[x.clone(), x], &[0.0; 4], 0.5, 1e-3).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }
}
