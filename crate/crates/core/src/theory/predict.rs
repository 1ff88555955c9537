//! Limit prediction from the initial state alone.
//!
//! Along the flow each sum `a_i + b_i` keeps its sign, and the first pair
//! whose sum is nonzero eventually captures the whole weight: the scale
//! converges to the matching singular value and the directions to that
//! singular pair. Pairs whose sum starts at exactly zero stay cancelled
//! forever, so counting leading zero sums reads off the limit.

use crate::model::{CoordState, TargetSpec};
use crate::scalar::{lit, to_f64, Scalar};

use super::TheoryError;

/// Below this magnitude an alignment indicator `a_i + b_i` is treated as
/// exactly cancelled. Ten times this is the "clearly live" threshold;
/// in between, prediction refuses to guess.
pub const INDICATOR_TOL: f64 = 1e-12;

/// Which critical point the flow converges to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    /// The top pair is live: the flow reaches the rank-one global minimum.
    GlobalMin,
    /// Pairs above `pair` are cancelled: the flow converges to the saddle
    /// aligned with singular pair `pair` (numbered from one).
    Saddle { pair: usize },
    /// Every in-rank pair is cancelled (or the scale starts at zero): the
    /// weight shrinks to the zero matrix.
    Zero,
}

/// Predicted limit of a flow started from a given state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T: Scalar> {
    pub kind: PredictionKind,
    /// Limit of the scale: `s_1` at the global minimum, `s_{k+1}` at a
    /// saddle, zero at the zero matrix.
    pub limit_s: T,
    /// One-based singular pair the limit aligns with; `None` for the zero
    /// limit. `Some(1)` if and only if the kind is [`PredictionKind::GlobalMin`].
    pub limit_index: Option<usize>,
}

/// Predicts the limit of the flow started at `state0`.
///
/// Scans `|a_i(0) + b_i(0)|` from the top: values at most [`INDICATOR_TOL`]
/// count as cancelled, values above ten times it as live. The first live
/// pair within the target's rank determines the limit; if none exists the
/// limit is zero. A decisive indicator falling in the grey zone between the
/// two thresholds is reported as [`TheoryError::AmbiguousIndicator`] rather
/// than guessed, since the true limit then depends on whether the value is
/// rounding noise or a genuinely tiny live component.
pub fn predict_limit<T: Scalar>(
    target: &TargetSpec<T>,
    state0: &CoordState<T>,
) -> Result<Prediction<T>, TheoryError> {
    let tol = lit::<T>(INDICATOR_TOL);
    let zero = Prediction {
        kind: PredictionKind::Zero,
        limit_s: T::zero(),
        limit_index: None,
    };
    if state0.s <= tol {
        return Ok(zero);
    }
    let d = target.d();
    for i in 0..d {
        let ind = (state0.a[i] + state0.b[i]).abs();
        if ind <= tol {
            continue;
        }
        if ind <= lit::<T>(10.0) * tol {
            return Err(TheoryError::AmbiguousIndicator {
                index: i + 1,
                value: to_f64(ind),
                tol: INDICATOR_TOL,
            });
        }
        let pair = i + 1;
        let kind = if pair == 1 {
            PredictionKind::GlobalMin
        } else {
            PredictionKind::Saddle { pair }
        };
        return Ok(Prediction {
            kind,
            limit_s: target.sv()[i],
            limit_index: Some(pair),
        });
    }
    Ok(zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::axis_state;
    use crate::model::target_from_factors;
    use crate::rng::{random_orthogonal, seeded};
    use nalgebra::DVector;

    fn example_target() -> TargetSpec<f64> {
        let mut rng = seeded(11, "predict-target");
        target_from_factors(
            random_orthogonal(&mut rng, 4),
            DVector::from_vec(vec![2.0, 1.5, 0.5]),
            random_orthogonal(&mut rng, 5),
            &Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn live_top_pair_lands_at_the_global_minimum() {
        let target = example_target();
        let state = axis_state(&target, 0, 0.3, false);
        let p = predict_limit(&target, &state).unwrap();
        assert_eq!(p.kind, PredictionKind::GlobalMin);
        assert_eq!(p.limit_index, Some(1));
        assert_eq!(p.limit_s, 2.0);
    }

    #[test]
    fn cancelled_leading_pairs_shift_the_limit_down_the_spectrum() {
        let target = example_target();
        // First pair exactly cancelled, second pair live.
        let a = DVector::from_vec(vec![0.6, 0.5, 0.0, 0.6244997998398398]);
        let b = DVector::from_vec(vec![-0.6, 0.5, 0.0, 0.0, 0.6244997998398398]);
        let state = CoordState::new(1.0, a, b);
        let p = predict_limit(&target, &state).unwrap();
        assert_eq!(p.kind, PredictionKind::Saddle { pair: 2 });
        assert_eq!(p.limit_index, Some(2));
        assert_eq!(p.limit_s, 1.5);
    }

    #[test]
    fn fully_cancelled_and_zero_scale_states_predict_the_zero_matrix() {
        let target = example_target();
        let a = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let b = DVector::from_vec(vec![-0.5, -0.5, -0.5, 0.5, 0.0]);
        let all_cancelled = CoordState::new(1.0, a, b);
        let p = predict_limit(&target, &all_cancelled).unwrap();
        assert_eq!(p.kind, PredictionKind::Zero);
        assert_eq!(p.limit_s, 0.0);
        assert_eq!(p.limit_index, None);

        let s_zero = axis_state(&target, 0, 0.0, false);
        let p0 = predict_limit(&target, &s_zero).unwrap();
        assert_eq!(p0.kind, PredictionKind::Zero);
    }

    #[test]
    fn grey_zone_indicators_refuse_to_predict() {
        let target = example_target();
        let a = DVector::from_vec(vec![0.7, 0.3, 0.0, 0.6480740698407861]);
        let mut b = DVector::from_vec(vec![-0.7, 0.3, 0.0, 0.0, 0.6480740698407861]);
        b[0] += 5e-12;
        let state = CoordState::new(1.0, a, b);
        match predict_limit(&target, &state) {
            Err(TheoryError::AmbiguousIndicator { index: 1, value, .. }) => {
                assert!(value > 1e-12 && value <= 1e-11);
            }
            other => panic!("expected an ambiguous indicator, got {other:?}"),
        }
    }

    #[test]
    fn indicators_below_rank_never_rescue_the_limit() {
        // All three in-rank pairs cancelled; the live fourth component of
        // `a` has no singular value to align with.
        let target = example_target();
        let a = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let b = DVector::from_vec(vec![-0.5, -0.5, -0.5, 0.5, 0.5]);
        let p = predict_limit(&target, &CoordState::new(0.8, a, b)).unwrap();
        assert_eq!(p.kind, PredictionKind::Zero);
    }
}
