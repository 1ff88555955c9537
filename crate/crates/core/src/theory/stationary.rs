//! Classifies direction pairs as stationary configurations of the flow.
//!
//! A pair `(u, v)` is stationary for the direction dynamics exactly when
//! `Z v` is parallel to `u` and `Z^T u` is parallel to `v` with the shared
//! coefficient `q = u^T Z v`; singular pairs (up to sign flips) and
//! null-space pairs are the two flavors.

use nalgebra::DVector;

use crate::model::TargetSpec;
use crate::scalar::Scalar;

/// Verdict of [`stationary_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StationaryClass<T: Scalar> {
    /// `u = u_sign * u_pair`, `v = v_sign * v_pair` for the given singular
    /// pair (numbered from one; signs are plus or minus one).
    Aligned { pair: usize, u_sign: i8, v_sign: i8 },
    /// Both directions sit in the target's null spaces (`Z v` and `Z^T u`
    /// vanish), so every scale is stationary too.
    NullSpace,
    /// The directions move; `residual` is the larger of `||Z v - q u||`
    /// and `||Z^T u - q v||`.
    NotStationary { residual: T },
}

/// Tests whether `(u, v)` is a stationary configuration of the direction
/// flow, up to `tol` on the defining residuals.
pub fn stationary_check<T: Scalar>(
    target: &TargetSpec<T>,
    u: &DVector<T>,
    v: &DVector<T>,
    tol: T,
) -> StationaryClass<T> {
    let q = (u.transpose() * target.z() * v)[(0, 0)];
    let ru = (target.z() * v - u * q).norm();
    let rv = (target.z().transpose() * u - v * q).norm();
    let residual = ru.max(rv);
    if residual > tol {
        return StationaryClass::NotStationary { residual };
    }
    if q.abs() <= tol {
        return StationaryClass::NullSpace;
    }
    // Nonzero q at a stationary pair forces alignment with a singular
    // pair; pick it by the dominant overlap.
    let mut pair = 1;
    let mut best = T::zero();
    for i in 0..target.d() {
        let overlap = u.dot(&target.u_col(i)).abs();
        if overlap > best {
            best = overlap;
            pair = i + 1;
        }
    }
    let u_sign = if u.dot(&target.u_col(pair - 1)) >= T::zero() { 1 } else { -1 };
    let v_sign = if v.dot(&target.v_col(pair - 1)) >= T::zero() { 1 } else { -1 };
    StationaryClass::Aligned { pair, u_sign, v_sign }
}
