//! Predicted limits, invariant monitors, stage detection, closed-form bounds
//! with a verification harness, analytic special cases, and rate fitting.
//!
//! Everything here consumes recorded trajectories or initial states and
//! compares them against what the coordinate ODEs imply. Violations of
//! monitored invariants are data (reported with magnitudes and times), not
//! errors; errors are reserved for inputs the theory genuinely does not
//! cover.
//!
//! Index convention: the classification types in this module number singular
//! pairs from one, so "pair 1" is the top pair `(u_1, v_1, s_1)`. Array
//! accesses into coordinate vectors subtract one internally. Low-level
//! constructors elsewhere in the crate (`axis_state`, `u_col`) keep their
//! zero-based array indices.

use thiserror::Error;

mod analytic;
mod bounds;
mod fit;
mod invariants;
mod predict;
mod stages;
mod stationary;
mod verify;

pub use analytic::{analytic_s, AnalyticKind};
pub use bounds::{
    bound_params, s_envelope, stage1_lower, stage1_threshold_time, stage2_lower, stage3_bounds,
    zero_limit_upper, BoundParams, Stage3Variant,
};
pub use fit::{rate_fit, rate_fit_loglog, RateFit, RateObservable};
pub use invariants::{monitor_invariants, InvariantCheck, InvariantReport};
pub use predict::{predict_limit, Prediction, PredictionKind, INDICATOR_TOL};
pub use stages::{detect_stages, dq_minus_ds_sign, DerivSource, StageReport};
pub use stationary::{stationary_check, StationaryClass};
pub use verify::{
    slice_window, verify_bounds, BoundReport, BoundSelector, BoundSlack, BoundViolation,
};

/// Errors from the prediction and verification layer.
#[derive(Debug, Error)]
pub enum TheoryError {
    /// A decisive alignment indicator sits in the grey zone between "treated
    /// as cancelled" and "clearly live"; the limit cannot be called.
    #[error(
        "AmbiguousIndicator: |a_{index} + b_{index}| = {value:e} lies between \
         the cancellation tolerance {tol:e} and 10x that"
    )]
    AmbiguousIndicator { index: usize, value: f64, tol: f64 },

    /// The top indicator is exactly zero, so the bound constants built from
    /// it (indicator ratio, alignment times) are undefined.
    #[error("DegenerateIndicator: a_1(0) + b_1(0) is exactly zero")]
    DegenerateIndicator,

    /// The requested bound does not exist for this depth or sign pattern.
    #[error("NotApplicable: {reason}")]
    NotApplicable { reason: String },

    /// Fewer samples than the operation needs (empty window, or a single
    /// point where a fit needs two).
    #[error("WindowEmpty: the requested window contains too few samples")]
    WindowEmpty,

    /// The state is not in the configuration the formula assumes (wrong
    /// axis, rank mismatch, non-square target where symmetry is required).
    #[error("NotAligned: {reason}")]
    NotAligned { reason: String },

    /// A log-scale fit was asked for an observable that is not strictly
    /// positive on the window.
    #[error("NonPositiveObservable: value {value:e} at t = {t:e}")]
    NonPositiveObservable { t: f64, value: f64 },

    /// The coordinate chart degenerates at non-positive scale.
    #[error("NonPositiveS: formula requires s > 0, got {s:e}")]
    NonPositiveS { s: f64 },
}

fn not_applicable(reason: impl Into<String>) -> TheoryError {
    TheoryError::NotApplicable { reason: reason.into() }
}

fn not_aligned(reason: impl Into<String>) -> TheoryError {
    TheoryError::NotAligned { reason: reason.into() }
}
