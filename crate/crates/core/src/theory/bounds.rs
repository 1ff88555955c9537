//! Closed-form envelopes and stage-wise bounds for the reduced flow.
//!
//! All curves are functions of the time elapsed since the start of the
//! window they apply to; the constants come from [`BoundParams`], which is
//! computed once from the window's first state. Bounds that go vacuous
//! (a scale lower bound dropping below zero, say) still evaluate; deciding
//! that a vacuous bound is trivially satisfied is the verifier's job.

use crate::model::{CoordState, TargetSpec};
use crate::scalar::{lit, lit_usize, pow_one_minus_2_over_n, to_f64, Scalar};

use super::{not_applicable, TheoryError};

/// Constants for the closed-form bounds, derived from the target spectrum
/// and the state at the start of the window under study.
///
/// Throughout, `N` is the depth, `s1 >= s2` the top two singular values,
/// `s(0)` the scale at the window start, and `s_hi = max(s1, s(0))` the
/// invariant scale ceiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams<T: Scalar> {
    pub depth: usize,
    /// Scale at the window start.
    pub s0_init: T,
    /// `max(s1, s(0))`: the flow never exceeds this scale.
    pub s_max: T,
    pub s1: T,
    pub s2: T,
    /// Top coefficients at the window start.
    pub a1_0: T,
    pub b1_0: T,
    /// `1 / (s1 + s_max)`.
    pub c1: T,
    /// `2 (s1 - s2) / (s1 + s_max)`.
    pub c2: T,
    /// `2 s1^(1 - 2/N) (s1 - s2)`: alignment rate when the scale stays at
    /// or above `s1`.
    pub c3: T,
    /// `N s1^(2 - 2/N)`: scale contraction rate toward `s1` from above.
    pub c4: T,
    /// `2 s(0)^(1 - 2/N) (s1 - s2)`: alignment rate when the scale stays at
    /// or above its window-start value.
    pub c5: T,
    /// `N s(0)^(2 - 2/N)`: scale recovery rate from the window start.
    pub c6: T,
    /// Odds of the initial top alignment: `c / (1 - c)` with
    /// `c = a1_0 * b1_0`. Infinite when the start is perfectly aligned,
    /// nonpositive when it starts misaligned.
    pub align_odds: T,
    /// `(s1 + s_max) s(0)^(1 - 2/N)`: rate of the polynomial clock
    /// `1 + clock_rate (N - 2) t` that replaces `e^(2t)` beyond two layers.
    pub clock_rate: T,
    /// `|a1_0 + b1_0| / |a1_0 - b1_0|`: how far the top pair is from exact
    /// cancellation relative to its spread. Below one means misaligned
    /// starts take a positive time to fix their sign.
    pub indicator_ratio: T,
    /// `2 (s1 + s_max)(N - 2) s(0)^(1 - 2/N)`; zero for two layers.
    pub stage1_rate: T,
    /// `1 / ((s1 + s_max)(N - 2))`; infinite for two layers.
    pub stage1_exponent: T,
    /// `(a1_0 + b1_0) / (a1_0 - b1_0)`, sign kept: drives the two-layer
    /// ratio identity `b1(t)/a1(t) = (r e^(2 s1 t) - 1)/(r e^(2 s1 t) + 1)`.
    /// Infinite when the coefficients start equal.
    pub signed_ratio: T,
    /// Upper bound on the sign-fixing time `t1` for `N >= 3`:
    /// `(indicator_ratio^(-(s1 + s_max)(N - 2)) - 1) / stage1_rate`.
    /// `None` at depth two or when the start is not misaligned
    /// (`indicator_ratio >= 1`). Bounds the true `t1` when `s1 >= 1`; the
    /// derivation normalizes the slowest rate by the top singular value.
    pub t1_upper: Option<T>,
    /// Two-layer analogue `ln(1 / indicator_ratio) / 2`, `None` when the
    /// start is not misaligned. Same `s1 >= 1` caveat.
    pub t1_upper_two: Option<T>,
}

impl<T: Scalar> BoundParams<T> {
    /// Initial top alignment `a1_0 * b1_0`.
    pub fn c1_0(&self) -> T {
        self.a1_0 * self.b1_0
    }

    /// Half-sum of the top coefficients at the window start.
    fn half_sum(&self) -> T {
        (self.a1_0 + self.b1_0) / lit(2.0)
    }

    /// Parameters for the scale-only bounds ([`s_envelope`],
    /// [`zero_limit_upper`]) of a run whose top pair is exactly cancelled,
    /// where [`bound_params`] refuses. The alignment-derived fields are
    /// filled from a placeholder state with `a1 = 1`, `b1 = 0`, which makes
    /// every alignment bound report itself as not applicable instead of
    /// evaluating garbage.
    pub fn scale_only(
        target: &TargetSpec<T>,
        s0_init: T,
        depth: usize,
    ) -> Result<Self, TheoryError> {
        from_scalars(depth, s0_init, target.s1(), target.s2(), T::one(), T::zero())
    }
}

/// Computes the bound constants from a window-start state.
///
/// Errors with [`TheoryError::NonPositiveS`] when the scale is not positive
/// and [`TheoryError::DegenerateIndicator`] when `a1 + b1` is exactly zero,
/// since the alignment-time constants are then undefined (a cancelled top
/// pair never aligns). For such runs use [`BoundParams::scale_only`].
pub fn bound_params<T: Scalar>(
    target: &TargetSpec<T>,
    state0: &CoordState<T>,
    depth: usize,
) -> Result<BoundParams<T>, TheoryError> {
    from_scalars(
        depth,
        state0.s,
        target.s1(),
        target.s2(),
        state0.a[0],
        state0.b[0],
    )
}

fn from_scalars<T: Scalar>(
    depth: usize,
    s0_init: T,
    s1: T,
    s2: T,
    a1_0: T,
    b1_0: T,
) -> Result<BoundParams<T>, TheoryError> {
    if s0_init <= T::zero() {
        return Err(TheoryError::NonPositiveS { s: to_f64(s0_init) });
    }
    if a1_0 + b1_0 == T::zero() {
        return Err(TheoryError::DegenerateIndicator);
    }
    let n = lit_usize::<T>(depth);
    let two = lit::<T>(2.0);
    let s_max = s1.max(s0_init);
    let gap = s1 - s2;
    let rim = s1 + s_max;
    let g0 = pow_one_minus_2_over_n(s0_init, depth);
    let g1 = pow_one_minus_2_over_n(s1, depth);

    let c1_0 = a1_0 * b1_0;
    let align_odds = c1_0 / (T::one() - c1_0);
    let sum = a1_0 + b1_0;
    let diff = a1_0 - b1_0;
    let indicator_ratio = sum.abs() / diff.abs();
    let signed_ratio = sum / diff;

    let nm2 = n - two;
    let stage1_rate = two * rim * nm2 * g0;
    let stage1_exponent = T::one() / (rim * nm2);

    let misaligned = indicator_ratio < T::one();
    let t1_upper = if depth >= 3 && misaligned {
        Some((indicator_ratio.powf(-rim * nm2) - T::one()) / stage1_rate)
    } else {
        None
    };
    let t1_upper_two = if misaligned {
        Some(-indicator_ratio.ln() / two)
    } else {
        None
    };

    Ok(BoundParams {
        depth,
        s0_init,
        s_max,
        s1,
        s2,
        a1_0,
        b1_0,
        c1: T::one() / rim,
        c2: two * gap / rim,
        c3: two * g1 * gap,
        c4: n * s1 * g1,
        c5: two * g0 * gap,
        c6: n * s0_init * g0,
        align_odds,
        clock_rate: rim * g0,
        indicator_ratio,
        stage1_rate,
        stage1_exponent,
        signed_ratio,
        t1_upper,
        t1_upper_two,
    })
}

/// Two-sided envelope on the scale, valid for the whole run: the upper
/// side is the invariant ceiling `max(s1, s(0))`, the lower side is the
/// worst-case contraction under fully adversarial alignment.
pub fn s_envelope<T: Scalar>(p: &BoundParams<T>, t: T) -> (T, T) {
    let rim = p.s1 + p.s_max;
    let lower = if p.depth == 2 {
        p.s0_init * (-lit::<T>(2.0) * rim * t).exp()
    } else {
        let n = lit_usize::<T>(p.depth);
        let nm2 = n - lit(2.0);
        let base = rim * nm2 * t + p.s0_init.powf(lit::<T>(2.0) / n - T::one());
        base.powf(-n / nm2)
    };
    (lower, p.s_max)
}

/// Lower bound on the top alignment `a1(t) b1(t)` during the sign-fixing
/// stage of a misaligned start, for depth at least three.
///
/// With `w(t) = indicator_ratio * (1 + stage1_rate * t)^(stage1_exponent)`,
/// the odds curve is `r(t) = (w - 1)/(w + 1)`; while negative it bounds the
/// alignment directly, once positive it is scaled by the square of the
/// half-sum `((a1(0) + b1(0))/2)^2`, the invariant floor of the growing
/// indicator.
pub fn stage1_lower<T: Scalar>(p: &BoundParams<T>, t: T) -> Result<T, TheoryError> {
    stage1_guard(p)?;
    let w = p.indicator_ratio * (T::one() + p.stage1_rate * t).powf(p.stage1_exponent);
    let ratio = (w - T::one()) / (w + T::one());
    if ratio < T::zero() {
        Ok(ratio)
    } else {
        Ok(ratio * p.half_sum() * p.half_sum())
    }
}

/// Time past which [`stage1_lower`] guarantees alignment of at least
/// `stage1_exponent / (2 + stage1_exponent)` times the squared half-sum.
pub fn stage1_threshold_time<T: Scalar>(p: &BoundParams<T>) -> Result<T, TheoryError> {
    stage1_guard(p)?;
    let x = (T::one() + p.stage1_exponent) / p.indicator_ratio;
    Ok((x.powf(T::one() / p.stage1_exponent) - T::one()) / p.stage1_rate)
}

fn stage1_guard<T: Scalar>(p: &BoundParams<T>) -> Result<(), TheoryError> {
    if p.depth < 3 {
        return Err(not_applicable(
            "the polynomial sign-fixing bound needs depth at least three",
        ));
    }
    if p.c1_0() >= T::zero() {
        return Err(not_applicable(
            "the sign-fixing bound applies to misaligned starts (a1 b1 < 0) only",
        ));
    }
    Ok(())
}

/// Lower bound on the top alignment `a1(t) b1(t)` from an aligned start
/// (`a1(0) b1(0) > 0`), depth at least three, while the scale may still be
/// below `s1`: alignment grows at least polynomially, with exponent
/// `c2 / (N - 2)` on the clock `1 + clock_rate (N - 2) t`.
pub fn stage2_lower<T: Scalar>(p: &BoundParams<T>, t: T) -> Result<T, TheoryError> {
    if p.depth < 3 {
        return Err(not_applicable(
            "the polynomial alignment bound needs depth at least three; two-layer \
             runs use the exponential variants",
        ));
    }
    if p.c1_0() <= T::zero() {
        return Err(not_applicable(
            "the alignment growth bound applies to aligned starts (a1 b1 > 0) only",
        ));
    }
    let nm2 = lit_usize::<T>(p.depth) - lit(2.0);
    let x = T::one() + p.clock_rate * nm2 * t;
    Ok(T::one() - T::one() / (p.align_odds * x.powf(p.c2 / nm2) + T::one()))
}

/// Which late-stage regime the exponential bounds describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage3Variant {
    /// Window starts after the alignment `q` has caught the scale `s`
    /// (any depth): the scale recovers from below, capped by `s1`.
    Stage3,
    /// Window of a run that never crosses (`q < s` throughout, scale
    /// descending to `s1` from above), depth at least three.
    Stage2p5,
    /// Two layers, window starting once `a1 b1 > 0`, covering growth and
    /// convergence together under the crude scale envelope.
    N2Stage23,
    /// Two layers, window starting after the crossing.
    N2Stage3,
    /// Two layers, crossing-free run descending to `s1`.
    N2T2Inf,
}

/// Exponential-regime bounds: returns `(c1_lower, s_lower, s_upper)` as
/// functions of time since the window start.
///
/// The alignment bound is `1 - 1/(1 + align_odds * e^(c t))` with the rate
/// `c` set by the variant's scale floor (`c5` when the scale stays above
/// its window-start value, `c3` when it stays above `s1`, and the
/// depth-free `2 (s1 - s2)` for the two-layer combined window). Scale
/// bounds that are vacuous at small times (negative lower bounds) are
/// returned as-is.
pub fn stage3_bounds<T: Scalar>(
    p: &BoundParams<T>,
    t: T,
    variant: Stage3Variant,
) -> Result<(T, T, T), TheoryError> {
    use Stage3Variant::*;
    let two_layer = matches!(variant, N2Stage23 | N2Stage3 | N2T2Inf);
    if two_layer && p.depth != 2 {
        return Err(not_applicable(
            "two-layer bound variant requested for a deeper network",
        ));
    }
    if p.c1_0() <= T::zero() {
        return Err(not_applicable(
            "the exponential bounds need the window to start aligned (a1 b1 > 0)",
        ));
    }
    if matches!(variant, Stage2p5 | N2T2Inf) && p.s0_init < p.s1 {
        return Err(not_applicable(
            "the crossing-free bounds need the window to start at or above s1",
        ));
    }

    let two = lit::<T>(2.0);
    let rate = match variant {
        Stage3 | N2Stage3 => p.c5,
        Stage2p5 | N2T2Inf => p.c3,
        N2Stage23 => two * (p.s1 - p.s2),
    };
    let c1_lower = T::one() - T::one() / (T::one() + p.align_odds * (rate * t).exp());

    let s_lower = match variant {
        Stage3 | N2Stage3 => {
            p.s1 - (p.s0_init + p.s1) * (-p.c6 * t).exp()
                - ((p.s1 + p.s2) * p.c6 / (p.align_odds * p.c5)) * (-p.c5 * t).exp()
        }
        Stage2p5 | N2T2Inf => p.s1,
        N2Stage23 => s_envelope(p, t).0,
    };

    let s_upper = match variant {
        Stage2p5 | N2T2Inf => p.s1 + (p.s0_init - p.s1) * (-p.c4 * t).exp(),
        Stage3 | N2Stage3 => p.s1,
        N2Stage23 => p.s_max,
    };

    Ok((c1_lower, s_lower, s_upper))
}

/// Upper envelope of the scale for runs converging to the zero matrix:
/// `(s(0)^(2/N - 2) + (2N - 2) t)^(-N / (2N - 2))`.
pub fn zero_limit_upper<T: Scalar>(s0_init: T, depth: usize, t: T) -> T {
    let n = lit_usize::<T>(depth);
    let two = lit::<T>(2.0);
    let denom = two * n - two;
    let base = s0_init.powf(two / n - two) + denom * t;
    base.powf(-n / denom)
}
