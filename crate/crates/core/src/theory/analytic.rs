//! Closed-form and high-accuracy reference solutions for the scale when the
//! directions sit exactly on a singular axis of the target.
//!
//! On such axes the direction equations vanish and the flow reduces to a
//! scalar ODE for `s` alone, which makes these solutions independent
//! oracles for the full integrators.

use nalgebra::DVector;

use crate::dynamics::integrate::{dp45_trial, next_dt};
use crate::dynamics::is_finite_scalar;
use crate::model::TargetSpec;
use crate::scalar::{lit, lit_usize, pow_one_minus_2_over_n, to_f64, Scalar};

use super::{not_aligned, TheoryError};

/// Which axis configuration the scale equation describes. Pairs are
/// numbered from one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticKind {
    /// `u = u_i`, `v = v_i`: the scale relaxes to the singular value,
    /// `ds/dt = N s^(2 - 2/N) (s_i - s)`.
    Aligned(usize),
    /// `u = u_i`, `v = -v_i` (or the mirror): the scale decays to zero,
    /// `ds/dt = -N s^(2 - 2/N) (s_i + s)`.
    Antialigned(usize),
    /// Square targets only: `W = -s u_i u_i^T` with `v` forced onto the
    /// same left axis. The scale obeys the antialigned equation.
    AntisymPsd(usize),
}

impl AnalyticKind {
    fn pair(self) -> usize {
        match self {
            AnalyticKind::Aligned(p) | AnalyticKind::Antialigned(p) | AnalyticKind::AntisymPsd(p) => p,
        }
    }
}

/// Scale of the axis-locked flow at time `t` from `s(0) = s0`.
///
/// Two-layer aligned runs use the logistic closed form
/// `s(t) = s_i s0 / (s0 + (s_i - s0) e^(-2 s_i t))`; everything else is
/// integrated with an adaptive scalar step at `rtol = 1e-12`, tight enough
/// to serve as an oracle at `1e-8` tolerances.
pub fn analytic_s<T: Scalar>(
    kind: AnalyticKind,
    target: &TargetSpec<T>,
    s0: T,
    depth: usize,
    t: T,
) -> Result<T, TheoryError> {
    let pair = kind.pair();
    if pair == 0 || pair > target.d() {
        return Err(not_aligned(format!(
            "singular pair {pair} does not exist (rank {})",
            target.d()
        )));
    }
    if matches!(kind, AnalyticKind::AntisymPsd(_)) && target.d_y() != target.d_x() {
        return Err(not_aligned(
            "the antisymmetric configuration needs a square target",
        ));
    }
    if s0 < T::zero() {
        return Err(TheoryError::NonPositiveS { s: to_f64(s0) });
    }
    if t < T::zero() {
        return Err(not_aligned("axis solutions are evaluated forward in time"));
    }
    if s0 == T::zero() || t == T::zero() {
        return Ok(s0);
    }

    let sv = target.sv()[pair - 1];
    let n = lit_usize::<T>(depth);
    match kind {
        AnalyticKind::Aligned(_) if depth == 2 => {
            let two = lit::<T>(2.0);
            Ok(sv * s0 / (s0 + (sv - s0) * (-two * sv * t).exp()))
        }
        AnalyticKind::Aligned(_) => scalar_ode(
            |s| n * s * pow_one_minus_2_over_n(s, depth) * (sv - s),
            s0,
            t,
        ),
        AnalyticKind::Antialigned(_) | AnalyticKind::AntisymPsd(_) => scalar_ode(
            |s| -(n * s * pow_one_minus_2_over_n(s, depth) * (sv + s)),
            s0,
            t,
        ),
    }
}

/// Adaptive Dormand-Prince on a single scalar equation.
fn scalar_ode<T: Scalar, F: Fn(T) -> T>(rhs: F, y0: T, t_end: T) -> Result<T, TheoryError> {
    let rtol = lit::<T>(1e-12);
    let atol = lit::<T>(1e-14);
    let mut f = |_t: T, y: &DVector<T>| DVector::from_element(1, rhs(y[0]));

    let mut t = T::zero();
    let mut y = DVector::from_element(1, y0);
    let mut k1 = f(t, &y);
    let mut dt_base = lit::<T>(1e-4).min(t_end);
    let dt_max = t_end;

    for _ in 0..10_000_000 {
        if t >= t_end {
            return Ok(y[0]);
        }
        let dt = dt_base.min(t_end - t);
        let trial = dp45_trial(&mut f, t, &y, &k1, dt, atol, rtol);
        let ratio = if is_finite_scalar(trial.y_new[0]) && is_finite_scalar(trial.err_ratio) {
            trial.err_ratio
        } else {
            lit(1e12)
        };
        let rejected = ratio > T::one();
        if !rejected {
            t += dt;
            y = trial.y_new;
            k1 = trial.k_new;
        }
        dt_base = next_dt(dt, ratio, dt_max, rejected);
        if dt_base < lit::<T>(1e-14) * t.abs().max(T::one()) {
            return Err(super::not_applicable(
                "scalar axis integration stalled below the step floor",
            ));
        }
    }
    Err(super::not_applicable(
        "scalar axis integration exhausted its step budget",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::target_from_factors;
    use crate::rng::{random_orthogonal, seeded};
    use nalgebra::DVector;

    fn square_target() -> TargetSpec<f64> {
        let mut rng = seeded(61, "analytic-target");
        target_from_factors(
            random_orthogonal(&mut rng, 3),
            DVector::from_vec(vec![2.0, 1.0]),
            random_orthogonal(&mut rng, 3),
            &Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn two_layer_aligned_scale_is_the_logistic_curve() {
        let target = square_target();
        let s = analytic_s(AnalyticKind::Aligned(1), &target, 1.0, 2, 1.0).unwrap();
        let e4 = 4.0f64.exp();
        assert!((s - 2.0 * e4 / (1.0 + e4)).abs() < 1e-14);
        assert!((s - 1.96403).abs() < 1e-5);
        // Starting above the fixed point relaxes downward.
        let hi = analytic_s(AnalyticKind::Aligned(1), &target, 3.0, 2, 2.0).unwrap();
        assert!(hi > 2.0 && hi < 3.0);
    }

    #[test]
    fn integrated_deep_aligned_scale_respects_the_fixed_point() {
        let target = square_target();
        // Exactly at the singular value the scale is stationary.
        let s = analytic_s(AnalyticKind::Aligned(1), &target, 2.0, 3, 5.0).unwrap();
        assert!((s - 2.0).abs() < 1e-10, "stationary scale drifted to {s}");
        // From below it converges to it.
        let s = analytic_s(AnalyticKind::Aligned(2), &target, 0.2, 4, 40.0).unwrap();
        assert!((s - 1.0).abs() < 1e-8, "deep aligned limit {s}");
        // Monotone along the way.
        let early = analytic_s(AnalyticKind::Aligned(2), &target, 0.2, 4, 1.0).unwrap();
        let later = analytic_s(AnalyticKind::Aligned(2), &target, 0.2, 4, 2.0).unwrap();
        assert!(0.2 < early && early < later && later < 1.0);
    }

    #[test]
    fn two_layer_antialigned_scale_matches_its_own_closed_form() {
        // ds/dt = -2 s (sv + s) solves to sv x / (1 - x) with
        // x = (s0 / (sv + s0)) e^(-2 sv t); the integrator never sees that
        // form, so agreement validates the adaptive path.
        let target = square_target();
        let (sv, s0, t) = (2.0f64, 1.5f64, 0.8f64);
        let x = s0 / (sv + s0) * (-2.0 * sv * t).exp();
        let expected = sv * x / (1.0 - x);
        let got = analytic_s(AnalyticKind::Antialigned(1), &target, s0, 2, t).unwrap();
        assert!((got - expected).abs() < 1e-10, "got {got}, expected {expected}");
    }

    #[test]
    fn antisymmetric_configuration_is_the_antialigned_equation_on_squares() {
        let target = square_target();
        let a = analytic_s(AnalyticKind::Antialigned(1), &target, 1.0, 3, 0.5).unwrap();
        let b = analytic_s(AnalyticKind::AntisymPsd(1), &target, 1.0, 3, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a < 1.0, "antialigned scale must shrink, got {a}");

        let mut rng = seeded(63, "analytic-rect");
        let rect: TargetSpec<f64> = target_from_factors(
            random_orthogonal(&mut rng, 3),
            DVector::from_vec(vec![2.0, 1.0]),
            random_orthogonal(&mut rng, 4),
            &Default::default(),
        )
        .unwrap();
        assert!(matches!(
            analytic_s(AnalyticKind::AntisymPsd(1), &rect, 1.0, 3, 0.5),
            Err(TheoryError::NotAligned { .. })
        ));
    }

    #[test]
    fn edge_inputs_are_handled_or_rejected() {
        let target = square_target();
        assert_eq!(analytic_s(AnalyticKind::Aligned(1), &target, 0.0, 3, 4.0).unwrap(), 0.0);
        assert_eq!(analytic_s(AnalyticKind::Aligned(1), &target, 0.7, 3, 0.0).unwrap(), 0.7);
        assert!(matches!(
            analytic_s(AnalyticKind::Aligned(3), &target, 1.0, 3, 1.0),
            Err(TheoryError::NotAligned { .. })
        ));
        assert!(matches!(
            analytic_s(AnalyticKind::Aligned(0), &target, 1.0, 3, 1.0),
            Err(TheoryError::NotAligned { .. })
        ));
        assert!(matches!(
            analytic_s(AnalyticKind::Aligned(1), &target, -1.0, 3, 1.0),
            Err(TheoryError::NonPositiveS { .. })
        ));
    }
}
