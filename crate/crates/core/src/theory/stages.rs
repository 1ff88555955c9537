//! Stage detection: when the top alignment turns nonnegative and when the
//! alignment `q` catches up with the scale `s`.
//!
//! A run started misaligned (`a_1 b_1 < 0`) with a large scale passes
//! through three phases: the scale shrinks while the alignment fixes its
//! sign (until `t1`), the alignment grows while the scale keeps shrinking
//! (until `t2`, where `q` reaches `s`), and finally the scale turns around
//! and converges. Both boundaries are located by linear interpolation
//! between the recorded samples that bracket the sign change.

use crate::model::{observables, CoordState, TargetSpec, Trajectory};
use crate::scalar::{lit_usize, pow_one_minus_2_over_n, to_f64, Scalar};

use super::TheoryError;

/// Where stage verification takes its derivative information from.
#[derive(Debug, Clone, Copy)]
pub enum DerivSource<'a, T: Scalar> {
    /// Differences of consecutive samples. Works for any recorded run,
    /// including gradient descent, at discretization accuracy.
    FiniteDifference,
    /// The coordinate right-hand side evaluated at each sample. Exact for
    /// flow runs; also certifies the `t2` crossing rate.
    Exact { target: &'a TargetSpec<T>, depth: usize },
}

/// Detected stage boundaries and the monotonicity facts around them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageReport<T: Scalar> {
    /// First time `a_1 b_1 >= 0`; the first sample's time when it already
    /// holds there, `None` when never reached.
    pub t1: Option<T>,
    /// First time `q >= s`, same conventions.
    pub t2: Option<T>,
    /// `a_1 b_1` never dropped by more than the tolerance between samples.
    pub c1_monotone_ok: bool,
    pub max_c1_drop: T,
    /// `s` was non-increasing up to `t2` and non-decreasing after (within
    /// the tolerance); the interval straddling `t2` is exempt.
    pub s_monotone_split_ok: bool,
    pub max_s_rise_before: T,
    pub max_s_drop_after: T,
    /// `d(q - s)/dt` at the first sample past `t2` (exact source only);
    /// strictly positive means the crossing is transversal, so `t2` is a
    /// genuine boundary and not a tangency.
    pub t2_crossing_rate: Option<T>,
}

/// Locates `t1` and `t2` on a recorded run and verifies the monotonicity
/// structure around them. `mono_tol` is the allowed backward motion per
/// sample interval (discretization noise for flows, larger for gradient
/// descent).
pub fn detect_stages<T: Scalar>(
    traj: &Trajectory<T>,
    source: DerivSource<'_, T>,
    mono_tol: T,
) -> Result<StageReport<T>, TheoryError> {
    if traj.is_empty() {
        return Err(TheoryError::WindowEmpty);
    }
    let samples = &traj.samples;

    let t1 = first_crossing(samples, |s| s.c1());
    let t2 = first_crossing(samples, |s| s.q - s.s);

    let mut max_c1_drop = T::zero();
    let mut max_s_rise_before = T::zero();
    let mut max_s_drop_after = T::zero();

    for pair in samples.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        max_c1_drop = max_c1_drop.max(prev.c1() - cur.c1());

        match side(prev.t, cur.t, t2) {
            Side::Before => max_s_rise_before = max_s_rise_before.max(cur.s - prev.s),
            Side::After => max_s_drop_after = max_s_drop_after.max(prev.s - cur.s),
            Side::Straddle => {}
        }
    }

    let mut t2_crossing_rate = None;
    if let DerivSource::Exact { target, depth } = source {
        // The exact scale velocity must agree with the split: downhill
        // strictly before t2, uphill strictly after.
        for sample in samples {
            if sample.s <= T::zero() {
                continue;
            }
            let sdot = lit_usize::<T>(depth)
                * sample.s
                * pow_one_minus_2_over_n(sample.s, depth)
                * (sample.q - sample.s);
            match side(sample.t, sample.t, t2) {
                Side::Before => max_s_rise_before = max_s_rise_before.max(sdot),
                Side::After => max_s_drop_after = max_s_drop_after.max(-sdot),
                Side::Straddle => {}
            }
        }
        if let Some(cross) = t2 {
            if let Some(at) = samples.iter().find(|s| s.t >= cross) {
                t2_crossing_rate =
                    Some(dq_minus_ds_sign(target, &at.state(), depth)?);
            }
        }
    }

    Ok(StageReport {
        t1,
        t2,
        c1_monotone_ok: max_c1_drop <= mono_tol,
        max_c1_drop,
        s_monotone_split_ok: max_s_rise_before <= mono_tol && max_s_drop_after <= mono_tol,
        max_s_rise_before,
        max_s_drop_after,
        t2_crossing_rate,
    })
}

/// Exact time derivative of `q - s` at a state, for certifying that the
/// `t2` crossing is transversal.
///
/// Differentiating `q = u^T Z v` along the flow gives
/// `dq/dt = g * (||(I - u u^T) Z v||^2 + ||(I - v v^T) Z^T u||^2)` with
/// `g = s^(1 - 2/N)`, which is nonnegative; subtracting
/// `ds/dt = N s^(2 - 2/N) (q - s)` yields the returned value.
pub fn dq_minus_ds_sign<T: Scalar>(
    target: &TargetSpec<T>,
    state: &CoordState<T>,
    depth: usize,
) -> Result<T, TheoryError> {
    if state.s <= T::zero() {
        return Err(TheoryError::NonPositiveS { s: to_f64(state.s) });
    }
    let d = target.d();
    let (q, _) = observables(target, state);
    let g = pow_one_minus_2_over_n(state.s, depth);

    let mut resid = T::zero();
    for i in 0..state.a.len() {
        let sv = if i < d { target.sv()[i] } else { T::zero() };
        let r = if i < d { sv * state.b[i] - q * state.a[i] } else { -q * state.a[i] };
        resid += r * r;
    }
    for j in 0..state.b.len() {
        let sv = if j < d { target.sv()[j] } else { T::zero() };
        let r = if j < d { sv * state.a[j] - q * state.b[j] } else { -q * state.b[j] };
        resid += r * r;
    }

    let q_dot = g * resid;
    let s_dot = lit_usize::<T>(depth) * state.s * g * (q - state.s);
    Ok(q_dot - s_dot)
}

enum Side {
    Before,
    After,
    Straddle,
}

fn side<T: Scalar>(t_lo: T, t_hi: T, boundary: Option<T>) -> Side {
    match boundary {
        None => Side::Before,
        Some(b) => {
            if t_hi <= b {
                Side::Before
            } else if t_lo >= b {
                Side::After
            } else {
                Side::Straddle
            }
        }
    }
}

/// First time `f(sample) >= 0`, linearly interpolated between the bracketing
/// samples; the first sample's own time when it holds there already.
fn first_crossing<T: Scalar, F: Fn(&crate::model::Sample<T>) -> T>(
    samples: &[crate::model::Sample<T>],
    f: F,
) -> Option<T> {
    let first = samples.first()?;
    if f(first) >= T::zero() {
        return Some(first.t);
    }
    for pair in samples.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let (fp, fc) = (f(prev), f(cur));
        if fc >= T::zero() {
            if fc == fp {
                return Some(cur.t);
            }
            let frac = -fp / (fc - fp);
            return Some(prev.t + frac * (cur.t - prev.t));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_coords, rhs_coords, IntegratorConfig};
    use crate::init::axis_state;
    use crate::model::{target_from_factors, CoordState};
    use crate::rng::{random_orthogonal, seeded};
    use nalgebra::DVector;

    fn target() -> TargetSpec<f64> {
        let mut rng = seeded(31, "stage-target");
        target_from_factors(
            random_orthogonal(&mut rng, 3),
            DVector::from_vec(vec![2.0, 1.0]),
            random_orthogonal(&mut rng, 3),
            &Default::default(),
        )
        .unwrap()
    }

    fn misaligned_state() -> CoordState<f64> {
        let a = DVector::from_vec(vec![0.4, 0.2, f64::sqrt(1.0 - 0.16 - 0.04)]);
        let b = DVector::from_vec(vec![-0.35, 0.25, f64::sqrt(1.0 - 0.1225 - 0.0625)]);
        CoordState::new(3.0, a, b)
    }

    #[test]
    fn misaligned_overscaled_runs_show_both_boundaries_in_order() {
        let target = target();
        let depth = 3;
        let cfg = IntegratorConfig { t_max: 40.0, ..Default::default() };
        let traj = integrate_coords(&target, &misaligned_state(), depth, &cfg).unwrap();

        let source = DerivSource::Exact { target: &target, depth };
        let report = detect_stages(&traj, source, 1e-8).unwrap();
        let t1 = report.t1.expect("alignment must fix its sign");
        let t2 = report.t2.expect("q must catch s");
        assert!(t1 > 0.0 && t2 > t1, "t1 = {t1}, t2 = {t2}");
        assert!(report.c1_monotone_ok, "worst c1 drop {:e}", report.max_c1_drop);
        assert!(
            report.s_monotone_split_ok,
            "rise before {:e}, drop after {:e}",
            report.max_s_rise_before, report.max_s_drop_after
        );
        let rate = report.t2_crossing_rate.expect("exact source certifies t2");
        assert!(rate > 0.0, "crossing must be transversal, rate {rate:e}");

        // Interpolated boundaries agree with the recorded signs.
        for s in &traj.samples {
            if s.t < t1 {
                assert!(s.c1() < 0.0);
            }
            if s.t < t2 {
                assert!(s.q < s.s);
            }
        }
    }

    #[test]
    fn boundaries_that_hold_at_the_start_are_reported_at_the_start() {
        let target = target();
        let state = axis_state(&target, 0, 0.5, false);
        let cfg = IntegratorConfig { t_max: 5.0, ..Default::default() };
        let traj = integrate_coords(&target, &state, 2, &cfg).unwrap();
        let report = detect_stages(&traj, DerivSource::FiniteDifference, 1e-9).unwrap();
        assert_eq!(report.t1, Some(0.0));
        assert_eq!(report.t2, Some(0.0));
        assert!(report.s_monotone_split_ok);
        assert!(report.t2_crossing_rate.is_none());
    }

    #[test]
    fn unreached_boundaries_are_none_and_the_scale_only_falls() {
        let target = target();
        // Far too short a horizon for the alignment to recover.
        let cfg = IntegratorConfig { t_max: 0.05, ..Default::default() };
        let traj = integrate_coords(&target, &misaligned_state(), 3, &cfg).unwrap();
        let report = detect_stages(
            &traj,
            DerivSource::Exact { target: &target, depth: 3 },
            1e-9,
        )
        .unwrap();
        assert_eq!(report.t1, None);
        assert_eq!(report.t2, None);
        assert!(report.s_monotone_split_ok);
        assert_eq!(report.max_s_drop_after, 0.0);
    }

    #[test]
    fn crossing_rate_matches_the_chain_rule_on_the_raw_derivatives() {
        let target = target();
        let depth = 4;
        let state = misaligned_state();
        let deriv = rhs_coords(&target, &state, depth).unwrap();
        // Assemble d(q - s)/dt directly from the coordinate velocities.
        let mut q_dot = 0.0;
        for j in 0..target.d() {
            let sv = target.sv()[j];
            q_dot += sv * (deriv.da[j] * state.b[j] + state.a[j] * deriv.db[j]);
        }
        let direct = q_dot - deriv.ds;
        let formula = dq_minus_ds_sign(&target, &state, depth).unwrap();
        assert!(
            (direct - formula).abs() < 1e-12,
            "direct {direct:e} vs formula {formula:e}"
        );
    }

    #[test]
    fn degenerate_inputs_error_cleanly() {
        let target = target();
        let state = CoordState::new(
            0.0,
            DVector::from_element(3, f64::sqrt(1.0 / 3.0)),
            DVector::from_element(3, f64::sqrt(1.0 / 3.0)),
        );
        assert!(matches!(
            dq_minus_ds_sign(&target, &state, 3),
            Err(TheoryError::NonPositiveS { .. })
        ));
        let empty = Trajectory::<f64> {
            samples: vec![],
            meta: crate::model::TrajectoryMeta {
                end: crate::model::RunEnd::External,
                steps: 0,
                max_tangency: 0.0,
                depth: 0,
            },
        };
        assert!(matches!(
            detect_stages(&empty, DerivSource::FiniteDifference, 1e-9),
            Err(TheoryError::WindowEmpty)
        ));
    }
}
