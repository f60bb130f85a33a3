//! Default numerical tolerances shared by every module.
//!
//! Values separate modelling error (what a check is meant to detect) from
//! floating-point error (what every computation carries). Callers can
//! override most of them through the parameter structs that embed them.

/// Relative residual allowed for the pointwise symplectic linear solve.
pub const TOL_SOLVE: f64 = 1e-12;
/// Closedness residual for forms with exact coefficient derivatives.
pub const TOL_CLOSED_EXACT: f64 = 1e-8;
/// Closedness residual for forms differentiated by central differences.
pub const TOL_CLOSED_FD: f64 = 1e-4;
/// Smallest admissible `|det Ω|`.
pub const NONDEGENERACY_FLOOR: f64 = 1e-10;

/// Pairwise Poisson bracket of an integrable family.
pub const TOL_COMMUTE: f64 = 1e-8;
/// Jacobi identity residual when nested brackets use finite differences.
pub const TOL_JACOBI: f64 = 1e-6;
/// Drift of first integrals along integrated trajectories.
pub const TOL_CONSERVE: f64 = 1e-8;
/// Order-permutation residual of the joint flow.
pub const TOL_COMMUTE_FLOW: f64 = 1e-7;
/// Distance at which a flowed point counts as returned.
pub const TOL_RETURN: f64 = 1e-8;
/// Lattice generators closer than this angle (radians) are merged.
pub const MERGE_ANGLE: f64 = 1e-3;

/// `|X_j(θ_k) − δ_jk|` in a canonical chart.
pub const TOL_DELTA: f64 = 1e-6;
/// Entrywise deviation of the pulled-back form from the standard block.
pub const TOL_DARBOUX: f64 = 1e-6;
/// Deviation of the flow from a translation in angle coordinates.
pub const TOL_LINEAR: f64 = 1e-6;
/// Obstruction of the corrected section to being lagrangian.
pub const TOL_LAGRANGIAN: f64 = 1e-7;
/// `‖d(Kα) − α‖∞` for the homotopy primitive.
pub const TOL_PRIMITIVE: f64 = 1e-6;

/// Rectification residual of a flow-box chart.
pub const TOL_RECTIFY: f64 = 1e-8;
/// Singular-value floor for rank decisions.
pub const RANK_FLOOR: f64 = 1e-8;
/// Minimum norm of the seed Hamiltonian field.
pub const SEED_FLOOR: f64 = 1e-6;
/// Bracket certification of a constructed commuting family.
pub const TOL_CERTIFY: f64 = 1e-7;

/// Smallest neighbourhood the adaptive shrinkage schedule will try.
pub const SHRINK_FLOOR: f64 = 1e-4;

/// Central-difference step for axis `i` at coordinate value `x`.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}
