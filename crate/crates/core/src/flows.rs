//! Hamiltonian flows, the joint ℝⁿ-action and its stabilizer lattice.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{ChartDomain, ScalarField, SymplecticStructure};
use crate::linalg;
use crate::ode::{self, Dop853, OdeOptions};
use crate::tolerances::{MERGE_ANGLE, RANK_FLOOR, TOL_COMMUTE, TOL_RETURN};

/// A symplectic chart with `n` Hamiltonians `f_1, …, f_n`.
#[derive(Debug, Clone)]
pub struct IntegrableSystemSpec {
    omega: SymplecticStructure,
    hamiltonians: Vec<ScalarField>,
}

impl IntegrableSystemSpec {
    /// Checks dimensions only; commutation is measured by [`commutation_report`].
    pub fn new(omega: SymplecticStructure, hamiltonians: Vec<ScalarField>) -> Result<IntegrableSystemSpec> {
        let n = omega.chart().n();
        if hamiltonians.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} Hamiltonians on a chart with n = {n}",
                hamiltonians.len()
            )));
        }
        if let Some(f) = hamiltonians.iter().find(|f| f.dim() != 2 * n) {
            return Err(Error::InvalidInput(format!(
                "Hamiltonian of dimension {} on a chart of dimension {}",
                f.dim(),
                2 * n
            )));
        }
        Ok(IntegrableSystemSpec { omega, hamiltonians })
    }

    pub fn omega(&self) -> &SymplecticStructure {
        &self.omega
    }

    pub fn chart(&self) -> &ChartDomain {
        self.omega.chart()
    }

    pub fn hamiltonians(&self) -> &[ScalarField] {
        &self.hamiltonians
    }

    pub fn n(&self) -> usize {
        self.hamiltonians.len()
    }

    pub fn dim(&self) -> usize {
        self.omega.dim()
    }

    /// `X_{f_j}(z)`.
    pub fn field(&self, j: usize, z: &[f64]) -> Result<DVector<f64>> {
        self.omega.hamiltonian_vector_field(&self.hamiltonians[j], z)
    }

    /// The matrix with columns `X_1(z), …, X_n(z)`.
    pub fn fields(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let cols = (0..self.n()).map(|j| self.field(j, z)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// `F(z) = (f_1(z), …, f_n(z))`.
    pub fn values(&self, z: &[f64]) -> Result<DVector<f64>> {
        let v = self.hamiltonians.iter().map(|f| f.value(z)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }

    /// `dF(z)`, one row per Hamiltonian.
    pub fn differential(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let rows = self
            .hamiltonians
            .iter()
            .map(|f| f.gradient(z).map(|g| g.transpose()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_rows(&rows))
    }

    /// `Σ t_j X_j(z)`, from a single solve.
    pub fn combined_field(&self, t: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.dim());
        for (tj, f) in t.iter().zip(&self.hamiltonians) {
            if *tj != 0.0 {
                g.axpy(*tj, &f.gradient(z)?, 1.0);
            }
        }
        self.omega.chart().check(z)?;
        self.omega.solve_hamiltonian(z, &g)
    }

    /// `{f_j, f_k}` at every pair, as a matrix.
    pub fn bracket_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.fields(z)?;
        let n = self.n();
        let mut b = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j + 1..n {
                let v = self.omega.evaluate(z, &x.column(j).into_owned(), &x.column(k).into_owned())?;
                b[(j, k)] = v;
                b[(k, j)] = -v;
            }
        }
        Ok(b)
    }

    /// Same system on a different chart.
    pub fn on_chart(&self, chart: ChartDomain) -> Result<IntegrableSystemSpec> {
        IntegrableSystemSpec::new(self.omega.on_chart(chart)?, self.hamiltonians.clone())
    }
}

/// Integrator settings for every flow in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub ode: OdeOptions,
    /// Largest admissible `|t|` for a single flow.
    pub max_time: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            ode: OdeOptions::default(),
            max_time: 1e4,
        }
    }
}

impl FlowParams {
    pub fn with_tolerance(tol: f64) -> FlowParams {
        let mut p = FlowParams::default();
        p.ode.rtol = tol;
        p.ode.atol = tol;
        p
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t.abs() > self.max_time {
            return Err(Error::InvalidInput(format!(
                "flow time {t} exceeds max_time {}",
                self.max_time
            )));
        }
        Ok(())
    }
}

fn inside(chart: &ChartDomain) -> impl Fn(&[f64]) -> bool + '_ {
    move |z| chart.contains(z)
}

/// Time-`t` flow of `X_{f_j}` from `p`.
pub fn integrate_flow(spec: &IntegrableSystemSpec, j: usize, p: &[f64], t: f64, params: &FlowParams) -> Result<DVector<f64>> {
    params.check_time(t)?;
    spec.chart().check(p)?;
    let rhs = |z: &[f64]| spec.field(j, z);
    ode::integrate(rhs, p, t, params.ode, &inside(spec.chart()))
}

/// `max_k |f_k(z(s)) − f_k(p)|` along the flow of `X_j` sampled at `samples`
/// equally spaced times in `[0, t]`.
pub fn conservation_drift(
    spec: &IntegrableSystemSpec,
    j: usize,
    p: &[f64],
    t: f64,
    samples: usize,
    params: &FlowParams,
) -> Result<f64> {
    params.check_time(t)?;
    let f0 = spec.values(p)?;
    let rhs = |z: &[f64]| spec.field(j, z);
    let mut solver = Dop853::new(rhs, DVector::from_column_slice(p), params.ode)?;
    let chart = spec.chart();
    let mut drift = 0.0_f64;
    for i in 1..=samples.max(1) {
        solver.advance_to(t * i as f64 / samples.max(1) as f64, &inside(chart))?;
        let f = spec.values(solver.y().as_slice())?;
        drift = drift.max((f - &f0).amax());
    }
    Ok(drift)
}

/// `ρ(t)(p)`: the flows of `X_1, …, X_n` applied in that order.
pub fn joint_action(spec: &IntegrableSystemSpec, t: &[f64], p: &[f64], params: &FlowParams) -> Result<DVector<f64>> {
    let order: Vec<usize> = (0..spec.n()).collect();
    joint_action_ordered(spec, t, p, &order, params)
}

/// The flows applied in the given order (`order[0]` first).
pub fn joint_action_ordered(
    spec: &IntegrableSystemSpec,
    t: &[f64],
    p: &[f64],
    order: &[usize],
    params: &FlowParams,
) -> Result<DVector<f64>> {
    if t.len() != spec.n() {
        return Err(Error::InvalidInput(format!("time vector of length {} for n = {}", t.len(), spec.n())));
    }
    let mut z = DVector::from_column_slice(p);
    for &j in order {
        if t[j] != 0.0 {
            z = integrate_flow(spec, j, z.as_slice(), t[j], params)?;
        }
    }
    Ok(z)
}

/// Largest distance between `ρ(t)(p)` computed in the natural order and in
/// every other order (all permutations for `n ≤ 4`, the reversal beyond).
pub fn order_permutation_residual(spec: &IntegrableSystemSpec, t: &[f64], p: &[f64], params: &FlowParams) -> Result<f64> {
    let n = spec.n();
    let reference = joint_action(spec, t, p, params)?;
    let orders: Vec<Vec<usize>> = if n <= 4 {
        permutations(n)
    } else {
        vec![(0..n).rev().collect()]
    };
    let mut worst = 0.0_f64;
    for order in orders.iter().skip(1) {
        let z = joint_action_ordered(spec, t, p, order, params)?;
        worst = worst.max(spec.chart().distance(reference.as_slice(), z.as_slice()));
    }
    Ok(worst)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(pos, n - 1);
            out.push(v);
        }
    }
    out.sort();
    out
}

/// Unit-time flow of `Σ t_j X_j`. For commuting fields this equals `ρ(t)(p)`
/// with a single integration instead of `n`.
pub fn combined_flow(spec: &IntegrableSystemSpec, t: &[f64], p: &[f64], params: &FlowParams) -> Result<DVector<f64>> {
    let rhs = |z: &[f64]| spec.combined_field(t, z);
    spec.chart().check(p)?;
    ode::integrate(rhs, p, 1.0, params.ode, &inside(spec.chart()))
}

/// [`combined_flow`] with `steps` fixed eighth-order steps.
pub fn combined_flow_fixed(spec: &IntegrableSystemSpec, t: &[f64], p: &[f64], steps: usize) -> Result<DVector<f64>> {
    let rhs = |z: &[f64]| spec.combined_field(t, z);
    ode::integrate_fixed(rhs, p, 1.0, steps)
}

// ---------------------------------------------------------------------------
// commutation

/// How a bracket behaves over a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BracketClass {
    /// `|{f_j, f_k}| ≤ tol` everywhere.
    Commuting,
    /// Nonzero but constant: a 2-cocycle of the comomentum choice.
    ConstantCocycle(f64),
    NonConstant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub j: usize,
    pub k: usize,
    /// `{f_j, f_k}` at each grid point, `NaN` where it could not be evaluated.
    pub samples: Vec<f64>,
    pub max_abs: f64,
    pub mean: f64,
    pub variance: f64,
    pub class: BracketClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommutationReport {
    pub pairs: Vec<PairStats>,
    pub tolerance: f64,
}

impl CommutationReport {
    pub fn max_residual(&self) -> f64 {
        self.pairs.iter().fold(0.0, |m, p| m.max(p.max_abs))
    }

    pub fn passed(&self) -> bool {
        self.pairs.iter().all(|p| p.class == BracketClass::Commuting)
    }

    pub fn pair(&self, j: usize, k: usize) -> Option<&PairStats> {
        self.pairs.iter().find(|p| p.j == j && p.k == k)
    }
}

/// Pairwise brackets over `grid` with the default tolerance.
pub fn commutation_report(spec: &IntegrableSystemSpec, grid: &[Vec<f64>]) -> CommutationReport {
    commutation_report_with(spec, grid, TOL_COMMUTE)
}

pub fn commutation_report_with(spec: &IntegrableSystemSpec, grid: &[Vec<f64>], tol: f64) -> CommutationReport {
    use rayon::prelude::*;
    let n = spec.n();
    let matrices: Vec<Option<DMatrix<f64>>> = grid.par_iter().map(|z| spec.bracket_matrix(z).ok()).collect();
    let mut pairs = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            let samples: Vec<f64> = matrices
                .iter()
                .map(|m| m.as_ref().map_or(f64::NAN, |m| m[(j, k)]))
                .collect();
            pairs.push(classify(j, k, samples, tol));
        }
    }
    CommutationReport { pairs, tolerance: tol }
}

fn classify(j: usize, k: usize, samples: Vec<f64>, tol: f64) -> PairStats {
    let count = samples.len().max(1) as f64;
    let failed = samples.iter().any(|v| !v.is_finite());
    let max_abs = if failed {
        f64::INFINITY
    } else {
        samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    };
    let mean = samples.iter().sum::<f64>() / count;
    let variance = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let class = if max_abs <= tol {
        BracketClass::Commuting
    } else if !failed && variance.sqrt() <= tol * mean.abs().max(1.0) {
        BracketClass::ConstantCocycle(mean)
    } else {
        BracketClass::NonConstant
    };
    PairStats {
        j,
        k,
        samples,
        max_abs,
        mean,
        variance,
        class,
    }
}

/// `max |ω(X_j, X_k)|` over the points `ρ(t)(p)` for the given times.
pub fn isotropy_check(spec: &IntegrableSystemSpec, p: &[f64], times: &[Vec<f64>], params: &FlowParams) -> Result<f64> {
    let mut worst = 0.0_f64;
    for t in times {
        let z = joint_action(spec, t, p, params)?;
        let b = spec.bracket_matrix(z.as_slice())?;
        worst = worst.max(linalg::max_abs(&b));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// period lattice

/// Settings for [`detect_period_lattice`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSearch {
    /// Largest flow time scanned along each axis.
    pub horizon: f64,
    pub tol_return: f64,
    pub merge_angle: f64,
    pub rank_floor: f64,
}

impl Default for LatticeSearch {
    fn default() -> Self {
        LatticeSearch {
            horizon: 20.0,
            tol_return: TOL_RETURN,
            merge_angle: MERGE_ANGLE,
            rank_floor: RANK_FLOOR,
        }
    }
}

impl LatticeSearch {
    pub fn with_horizon(horizon: f64) -> LatticeSearch {
        LatticeSearch {
            horizon,
            ..LatticeSearch::default()
        }
    }
}

/// Stabilizer of a point for the joint action.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitTopology {
    /// Torus rank: the orbit is `ℝ^{n−m} × 𝕋^m`.
    pub m: usize,
    /// Generators of the stabilizer lattice.
    pub lattice_basis: Vec<DVector<f64>>,
    /// `dF_p` has full rank.
    pub regular: bool,
    /// Smallest singular value of `dF_p`.
    pub sigma_min: f64,
    /// `‖ρ(t)(p) − p‖` for each generator.
    pub residuals: Vec<f64>,
    /// Fewer than `n` generators were found within the horizon; `m` is then a lower bound.
    pub search_exhausted: bool,
    pub notes: Vec<String>,
}

/// Finds the stabilizer lattice of `p`.
///
/// Each axis `e_j` is scanned on a time grid for near returns of
/// `s ↦ ρ(s e_j)(p)`. Each candidate is refined by Gauss–Newton on
/// `g(t) = ρ(t)(p) − p` over all of `ℝⁿ`, using `∂_{t_j} ρ(t)(p) = X_j(ρ(t)(p))`.
/// The accepted returns are merged and size reduced into a basis.
pub fn detect_period_lattice(
    spec: &IntegrableSystemSpec,
    p: &[f64],
    params: &FlowParams,
    search: &LatticeSearch,
) -> Result<OrbitTopology> {
    spec.chart().check(p)?;
    let n = spec.n();
    let sigma_min = linalg::sigma_min(&spec.differential(p)?);
    if !(sigma_min >= search.rank_floor) {
        return Err(Error::NotRegular { sigma_min });
    }
    let mut notes = Vec::new();
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    for j in 0..n {
        match scan_axis(spec, j, p, params, search)? {
            Some(t) => candidates.push(t),
            None => notes.push(format!("no return along axis {} within T = {}", j + 1, search.horizon)),
        }
    }
    let mut basis = reduce_candidates(spec, p, params, search, candidates, &mut notes)?;
    lll_reduce(&mut basis);
    for b in basis.iter_mut() {
        // Sign normalisation: first significant component positive.
        if let Some(c) = b.iter().find(|c| c.abs() > 1e-12) {
            if *c < 0.0 {
                *b = -b.clone();
            }
        }
    }
    let residuals = basis
        .iter()
        .map(|t| return_residual(spec, p, t.as_slice(), params))
        .collect::<Result<Vec<_>>>()?;
    let m = basis.len();
    Ok(OrbitTopology {
        m,
        lattice_basis: basis,
        regular: true,
        sigma_min,
        residuals,
        search_exhausted: m < n,
        notes,
    })
}

/// `‖ρ(t)(p) − p‖`, measured with the chart's periodic identifications.
pub fn return_residual(spec: &IntegrableSystemSpec, p: &[f64], t: &[f64], params: &FlowParams) -> Result<f64> {
    let z = combined_flow(spec, t, p, params)?;
    Ok(spec.chart().distance(p, z.as_slice()))
}

/// `‖X‖ / ‖DX·X‖`: the time over which `X` turns appreciably near `p`.
fn curvature_time(spec: &IntegrableSystemSpec, j: usize, p: &[f64]) -> Result<f64> {
    let x = spec.field(j, p)?;
    let speed = x.norm();
    if speed == 0.0 {
        return Ok(f64::INFINITY);
    }
    let eps = 1e-5 * (1.0 + DVector::from_column_slice(p).amax());
    let dir = &x / speed;
    let zp = DVector::from_column_slice(p) + &dir * eps;
    let zm = DVector::from_column_slice(p) - &dir * eps;
    let (xp, xm) = match (spec.field(j, zp.as_slice()), spec.field(j, zm.as_slice())) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Ok(f64::INFINITY),
    };
    let accel = ((xp - xm) / (2.0 * eps)).norm() * speed;
    Ok(if accel > 0.0 { speed / accel } else { f64::INFINITY })
}

fn scan_axis(
    spec: &IntegrableSystemSpec,
    j: usize,
    p: &[f64],
    params: &FlowParams,
    search: &LatticeSearch,
) -> Result<Option<DVector<f64>>> {
    let n = spec.n();
    let chart = spec.chart();
    let speed = spec.field(j, p)?.norm();
    if speed == 0.0 {
        return Ok(None);
    }
    let tau = curvature_time(spec, j, p)?;
    let delta = (0.01 * search.horizon).min(0.05 * tau);
    let steps = (search.horizon / delta).ceil() as usize;
    let rhs = |z: &[f64]| spec.field(j, z);
    let mut solver = Dop853::new(rhs, DVector::from_column_slice(p), params.ode)?;
    let mut dist = vec![0.0];
    for i in 1..=steps {
        let s = i as f64 * delta;
        match solver.advance_to(s, &inside(chart)) {
            Ok(()) => {}
            Err(Error::LeftDomain { .. }) => break,
            Err(e) => return Err(e),
        }
        dist.push(chart.distance(p, solver.y().as_slice()));
        let len = dist.len();
        if len < 3 {
            continue;
        }
        let (a, b, c) = (dist[len - 3], dist[len - 2], dist[len - 1]);
        if b <= a && b <= c && b < 1.5 * delta * speed {
            let s0 = (len - 2) as f64 * delta;
            let mut t0 = DVector::zeros(n);
            t0[j] = s0;
            if let Some(t) = refine_return(spec, p, t0, params, search)? {
                if t.norm() > 0.5 * delta {
                    return Ok(Some(t));
                }
            }
        }
    }
    Ok(None)
}

/// Gauss–Newton on `g(t) = ρ(t)(p) − p`; `None` if the residual stays above `tol_return`.
fn refine_return(
    spec: &IntegrableSystemSpec,
    p: &[f64],
    mut t: DVector<f64>,
    params: &FlowParams,
    search: &LatticeSearch,
) -> Result<Option<DVector<f64>>> {
    let chart = spec.chart();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for _ in 0..40 {
        let z = match combined_flow(spec, t.as_slice(), p, params) {
            Ok(z) => z,
            Err(Error::LeftDomain { .. }) | Err(Error::OutOfDomain { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let g = chart.displacement(p, z.as_slice());
        let r = g.norm();
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, t.clone()));
        }
        if r <= 1e-3 * search.tol_return {
            break;
        }
        let jac = spec.fields(z.as_slice())?;
        let step = linalg::least_squares(&jac, &(-g));
        t += &step;
        if step.norm() <= 1e-15 * t.norm().max(1.0) {
            break;
        }
    }
    Ok(best.and_then(|(r, t)| (r <= search.tol_return).then_some(t)))
}

fn reduce_candidates(
    spec: &IntegrableSystemSpec,
    p: &[f64],
    params: &FlowParams,
    search: &LatticeSearch,
    mut candidates: Vec<DVector<f64>>,
    notes: &mut Vec<String>,
) -> Result<Vec<DVector<f64>>> {
    candidates.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for c in candidates {
        let sine = if basis.is_empty() {
            1.0
        } else {
            let span = DMatrix::from_columns(&basis);
            let coef = linalg::least_squares(&span, &c);
            (&c - &span * &coef).norm() / c.norm()
        };
        if sine >= search.merge_angle.sin() {
            basis.push(c);
            continue;
        }
        // Dependent on the basis: either an integer combination, or evidence of a
        // finer lattice that only a gcd step can recover.
        let span = DMatrix::from_columns(&basis);
        let coef = linalg::least_squares(&span, &c);
        let integral = coef.iter().all(|a| (a - a.round()).abs() < 1e-6);
        if integral {
            continue;
        }
        if basis.len() == 1 {
            let b = basis[0].clone();
            if let Some(g) = real_gcd(b.norm(), c.norm(), 1e-6 * b.norm()) {
                let candidate = &b * (g / b.norm());
                if return_residual(spec, p, candidate.as_slice(), params)? <= search.tol_return {
                    notes.push(format!(
                        "merged collinear generators of lengths {:.6} and {:.6} into {:.6}",
                        b.norm(),
                        c.norm(),
                        g
                    ));
                    basis[0] = candidate;
                    continue;
                }
            }
        }
        notes.push(format!(
            "candidate {:?} is within {:.1e} rad of the current span but not an integer combination; m is a lower bound",
            c.as_slice(),
            search.merge_angle
        ));
    }
    Ok(basis)
}

/// Euclid's algorithm on reals, stopping when the remainder drops below `tol`.
fn real_gcd(a: f64, b: f64, tol: f64) -> Option<f64> {
    let (mut x, mut y) = (a.max(b), a.min(b));
    for _ in 0..64 {
        if y <= tol {
            return Some(x);
        }
        let r = x - y * (x / y).floor();
        let r = if (y - r).abs() <= tol { 0.0 } else { r };
        x = y;
        y = r;
    }
    None
}

/// LLL reduction with `δ = 3/4`.
pub fn lll_reduce(basis: &mut [DVector<f64>]) {
    let k_max = basis.len();
    if k_max < 2 {
        return;
    }
    let gram_schmidt = |b: &[DVector<f64>]| -> (Vec<DVector<f64>>, DMatrix<f64>) {
        let mut bs: Vec<DVector<f64>> = Vec::new();
        let mut mu = DMatrix::zeros(b.len(), b.len());
        for i in 0..b.len() {
            let mut v = b[i].clone();
            for j in 0..i {
                mu[(i, j)] = b[i].dot(&bs[j]) / bs[j].norm_squared();
                v -= &bs[j] * mu[(i, j)];
            }
            bs.push(v);
        }
        (bs, mu)
    };
    let mut k = 1;
    let mut guard = 0;
    while k < k_max && guard < 1000 {
        guard += 1;
        for j in (0..k).rev() {
            let (_, mu) = gram_schmidt(basis);
            let r = mu[(k, j)].round();
            if r != 0.0 {
                let bj = basis[j].clone();
                basis[k] -= bj * r;
            }
        }
        let (bs, mu) = gram_schmidt(basis);
        if bs[k].norm_squared() >= (0.75 - mu[(k, k - 1)].powi(2)) * bs[k - 1].norm_squared() {
            k += 1;
        } else {
            basis.swap(k, k - 1);
            k = (k - 1).max(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn oscillator() -> IntegrableSystemSpec {
        let omega = SymplecticStructure::standard(ChartDomain::cube(1, 3.0));
        IntegrableSystemSpec::new(omega, vec![ScalarField::parse("(q^2+p^2)/2", 1).unwrap()]).unwrap()
    }

    #[test]
    fn oscillator_quarter_turn() {
        let spec = oscillator();
        let z = integrate_flow(&spec, 0, &[1.0, 0.0], PI / 2.0, &FlowParams::default()).unwrap();
        assert!(z[0].abs() < 1e-10 && (z[1] - 1.0).abs() < 1e-10);
        let z = integrate_flow(&spec, 0, &[1.0, 0.0], 0.0, &FlowParams::default()).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(3)[0], vec![0, 1, 2]);
    }

    #[test]
    fn cocycle_and_nonconstant_brackets_are_distinguished() {
        let chart = ChartDomain::cube(1, 2.0);
        let omega = SymplecticStructure::standard(chart.clone());
        let grid = chart.grid(5);
        let qp = IntegrableSystemSpec {
            omega: omega.clone(),
            hamiltonians: vec![ScalarField::parse("q", 1).unwrap(), ScalarField::parse("p", 1).unwrap()],
        };
        let report = commutation_report(&qp, &grid);
        assert_eq!(report.pairs[0].class, BracketClass::ConstantCocycle(1.0));
        let qqp = IntegrableSystemSpec {
            omega,
            hamiltonians: vec![ScalarField::parse("q", 1).unwrap(), ScalarField::parse("q*p", 1).unwrap()],
        };
        let report = commutation_report(&qqp, &grid);
        assert_eq!(report.pairs[0].class, BracketClass::NonConstant);
    }

    #[test]
    fn lll_recovers_a_short_basis() {
        let mut b = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![5.0, 1.0]),
        ];
        lll_reduce(&mut b);
        assert!((b[1].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn real_gcd_of_commensurate_lengths() {
        let g = real_gcd(4.0 * PI, 6.0 * PI, 1e-9).unwrap();
        assert!((g - 2.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn oscillator_lattice() {
        let spec = oscillator();
        let topo = detect_period_lattice(&spec, &[1.0, 0.0], &FlowParams::default(), &LatticeSearch::default()).unwrap();
        assert_eq!(topo.m, 1);
        assert!((topo.lattice_basis[0][0] - 2.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn critical_point_is_not_regular() {
        let spec = oscillator();
        let err = detect_period_lattice(&spec, &[0.0, 0.0], &FlowParams::default(), &LatticeSearch::default()).unwrap_err();
        assert!(matches!(err, Error::NotRegular { .. }));
    }
}
