//! Flow and descent dynamics for networks whose induced weight has rank one.
//!
//! The reduced flow lives on `(s, a, b)`: scale plus the coordinates of the
//! current directions in the target's singular bases. The full matrix flow on
//! the induced weight is kept as an independent reference implementation, and
//! gradient descent on explicit layer stacks lives in [`gd`].

pub mod gd;
pub mod integrate;

pub use gd::{gd_run, layer_gradients, GdConfig};
pub use integrate::{
    integrate_coords, integrate_induced, IntegratorConfig, Method, StageEvent, StopCondition,
};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{rank_one_svd, CoordState, ModelError, TargetSpec, Tolerances};
use crate::scalar::{lit, lit_usize, pow_one_minus_2_over_n, to_f64, Scalar};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("DivergenceDetected: scale {s:e} exceeded {limit:e}")]
    DivergenceDetected { s: f64, limit: f64 },
    #[error("StepSizeUnderflow: step size collapsed to {dt:e} at t = {t:e}")]
    StepSizeUnderflow { t: f64, dt: f64 },
    #[error("StepBudgetExhausted: {steps} steps used before the stop condition (t = {t:e})")]
    StepBudgetExhausted { t: f64, steps: usize },
    #[error("NonFiniteState: state became non-finite at t = {t:e}")]
    NonFiniteState { t: f64 },
    #[error("NonPositiveS: coordinate chart degenerates at s = {s:e}")]
    NonPositiveS { s: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Time derivative of a [`CoordState`].
#[derive(Debug, Clone)]
pub struct CoordDeriv<T: Scalar> {
    pub ds: T,
    pub da: DVector<T>,
    pub db: DVector<T>,
}

impl<T: Scalar> CoordDeriv<T> {
    /// Sup norm over all components.
    pub fn sup(&self) -> T {
        let m = self.da.iter().chain(self.db.iter()).fold(T::zero(), |acc, x| acc.max(x.abs()));
        m.max(self.ds.abs())
    }
}

/// Right-hand side of the reduced flow for a depth-`n` network:
///
/// ```text
/// ds/dt   = n s^(2-2/n) (q - s)          q = sum_j sv_j a_j b_j
/// da_i/dt = s^(1-2/n) (sv_i b_i - a_i q)  (sv_i = 0 beyond the rank)
/// db_i/dt = s^(1-2/n) (sv_i a_i - b_i q)
/// ```
///
/// The coordinate chart degenerates at `s = 0`, so `s > 0` is required here.
/// (The integrator evaluates internal stage states through a total variant
/// that tolerates transient non-positive `s`.)
pub fn rhs_coords<T: Scalar>(
    target: &TargetSpec<T>,
    state: &CoordState<T>,
    depth: usize,
) -> Result<CoordDeriv<T>, DynamicsError> {
    if state.s <= T::zero() {
        return Err(DynamicsError::NonPositiveS { s: to_f64(state.s) });
    }
    Ok(rhs_coords_raw(target, state, depth))
}

/// Total version of [`rhs_coords`]: evaluates the same formulas without the
/// `s > 0` check. For even roots of negative `s` the power is NaN, which the
/// adaptive integrator treats as a rejected step. Coefficient pairs with
/// `b_i == -a_i` keep that mirror bitwise: every term in `da_i` is the exact
/// negation of its counterpart in `db_i`, and `q` is computed once.
pub(crate) fn rhs_coords_raw<T: Scalar>(
    target: &TargetSpec<T>,
    state: &CoordState<T>,
    depth: usize,
) -> CoordDeriv<T> {
    debug_assert!(depth >= 2);
    let d = target.d();
    let s = state.s;
    let g = pow_one_minus_2_over_n(s, depth);
    let mut q = T::zero();
    for j in 0..d {
        q += target.sv()[j] * state.a[j] * state.b[j];
    }
    let ds = lit_usize::<T>(depth) * g * s * (q - s);
    // The cross term sv_i * b_i vanishes beyond the rank, where the other
    // vector may be shorter; never index it there.
    let da = DVector::from_fn(state.a.len(), |i, _| {
        let cross = if i < d { target.sv()[i] * state.b[i] } else { T::zero() };
        g * (cross - state.a[i] * q)
    });
    let db = DVector::from_fn(state.b.len(), |i, _| {
        let cross = if i < d { target.sv()[i] * state.a[i] } else { T::zero() };
        g * (cross - state.b[i] * q)
    });
    CoordDeriv { ds, da, db }
}

/// Symmetric fractional power `m^p` via eigendecomposition. `p = 0` gives
/// the identity.
///
/// Eigenvalues below `eps^(3/4)` of the largest are flushed to zero, not
/// just negative ones. Forming a Gram matrix explicitly floors its spectrum
/// at roundoff (about `eps * lam_max`), and a fractional power amplifies
/// that noise to `eps^p` scale, far above the noise itself; the relative
/// floor removes it while leaving genuinely small directions intact.
fn sym_pow<T: Scalar>(m: &DMatrix<T>, p: T) -> DMatrix<T> {
    let n = m.nrows();
    if p == T::zero() {
        return DMatrix::identity(n, n);
    }
    let eig = m.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().fold(T::zero(), |acc, l| acc.max(*l));
    let floor = lam_max * T::default_epsilon().powf(lit(0.75));
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let lam = eig.eigenvalues[j];
        let f = if lam <= floor { T::zero() } else { lam.powf(p) };
        for i in 0..n {
            scaled[(i, j)] *= f;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Right-hand side of the induced-weight flow for a balanced depth-`n`
/// network, on the rank-one manifold where the flow actually lives:
///
/// ```text
/// dW/dt = - sum_{j=1..n} (W W^T)^((n-j)/n) (W - Z) (W^T W)^((j-1)/n)
/// ```
///
/// `W` must have numerical rank at most one; the Gram powers then reduce to
/// `s^(2p) u u^T` (resp. `v v^T`) and the sum collapses to the closed form in
/// [`induced_rhs_rank_one`]. `W = 0` maps to the zero derivative.
pub fn induced_rhs<T: Scalar>(
    target: &TargetSpec<T>,
    w: &DMatrix<T>,
    depth: usize,
    tol: &Tolerances<T>,
) -> Result<DMatrix<T>, DynamicsError> {
    let top = rank_one_svd(w, tol)?;
    match top.dirs {
        None => Ok(DMatrix::zeros(w.nrows(), w.ncols())),
        Some((u, v)) => Ok(induced_rhs_rank_one(target, top.s, &u, &v, depth)),
    }
}

/// Total extension of [`induced_rhs`] off the rank-one manifold, evaluating
/// the Gram-power sum as written. Kept as the independent reference the
/// rank-one shortcut and the matrix integrator are checked against; the
/// integrator itself goes through the leading singular triple instead (see
/// [`integrate::integrate_induced`]), because transverse to the manifold
/// this extension is only Holder continuous for depth 3 and up.
pub fn induced_rhs_extended<T: Scalar>(
    target: &TargetSpec<T>,
    w: &DMatrix<T>,
    depth: usize,
) -> DMatrix<T> {
    debug_assert!(depth >= 2);
    let r = w - target.z();
    let left_gram = w * w.transpose();
    let right_gram = w.transpose() * w;
    let n_t = lit_usize::<T>(depth);
    let mut sum = DMatrix::zeros(w.nrows(), w.ncols());
    for j in 1..=depth {
        let p_left = lit_usize::<T>(depth - j) / n_t;
        let p_right = lit_usize::<T>(j - 1) / n_t;
        sum += sym_pow(&left_gram, p_left) * &r * sym_pow(&right_gram, p_right);
    }
    -sum
}

/// Induced-weight flow specialized to `W = s u v^T` with unit `u`, `v`:
///
/// ```text
/// dW/dt = - s^(2-2/n) [ u u^T R + R v v^T + (n-2) u u^T R v v^T ]
/// ```
///
/// with `R = W - Z`. Agrees with [`induced_rhs_extended`] on rank-one inputs.
pub fn induced_rhs_rank_one<T: Scalar>(
    target: &TargetSpec<T>,
    s: T,
    u: &DVector<T>,
    v: &DVector<T>,
    depth: usize,
) -> DMatrix<T> {
    debug_assert!(depth >= 2);
    let r = u * v.transpose() * s - target.z();
    let ut_r = u.transpose() * &r;
    let r_v = &r * v;
    let u_ut_r = u * &ut_r;
    let r_v_vt = &r_v * v.transpose();
    let middle = u * (&ut_r * v) * v.transpose();
    let factor = pow_one_minus_2_over_n(s, depth) * s;
    -(u_ut_r + r_v_vt + middle * lit_usize::<T>(depth - 2)) * factor
}

/// Sup norm of a matrix-valued derivative.
pub fn matrix_sup<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

pub(crate) fn is_finite_scalar<T: Scalar>(x: T) -> bool {
    to_f64(x).is_finite()
}
