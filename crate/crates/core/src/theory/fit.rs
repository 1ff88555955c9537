//! Least-squares rate extraction from recorded runs.
//!
//! Convergence proofs come with rates; fitting the observed decay on a log
//! scale and comparing the slope against the guaranteed rate (an
//! inequality, not an equality) is how trajectories certify them.

use crate::model::{Sample, Trajectory};
use crate::scalar::{to_f64, Scalar};

use super::TheoryError;

/// Which decaying quantity to fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateObservable<T: Scalar> {
    /// `1 - a_1 b_1`: distance of the top alignment from saturation.
    OneMinusC1,
    /// `s1 - s`: distance of the scale from its limit, from below.
    S1MinusS { s1: T },
}

impl<T: Scalar> RateObservable<T> {
    fn value(&self, sample: &Sample<T>) -> T {
        match *self {
            RateObservable::OneMinusC1 => T::one() - sample.c1(),
            RateObservable::S1MinusS { s1 } => s1 - sample.s,
        }
    }
}

/// Straight-line fit of a log-scale observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit<T: Scalar> {
    /// Slope of `ln(observable)` against the regressor (time, or log-time
    /// for the polynomial variant). Negative for decay.
    pub slope: T,
    pub intercept: T,
    /// Coefficient of determination; one means a perfect line.
    pub r_squared: T,
    pub samples_used: usize,
}

/// Fits `ln(observable)` against `t` over the samples with
/// `window.0 <= t <= window.1`; the negated slope estimates an exponential
/// decay rate.
pub fn rate_fit<T: Scalar>(
    traj: &Trajectory<T>,
    window: (T, T),
    observable: RateObservable<T>,
) -> Result<RateFit<T>, TheoryError> {
    fit_core(traj, window, observable, |t| Ok(t))
}

/// Fits `ln(observable)` against `ln(abscissa(t))`; the negated slope
/// estimates a polynomial decay exponent in the chosen clock (for the
/// growth-stage bounds, `abscissa` is `1 + clock_rate (N - 2) (t - t0)`).
pub fn rate_fit_loglog<T: Scalar, F: Fn(T) -> T>(
    traj: &Trajectory<T>,
    window: (T, T),
    observable: RateObservable<T>,
    abscissa: F,
) -> Result<RateFit<T>, TheoryError> {
    fit_core(traj, window, observable, |t| {
        let x = abscissa(t);
        if x <= T::zero() {
            return Err(TheoryError::NonPositiveObservable {
                t: to_f64(t),
                value: to_f64(x),
            });
        }
        Ok(x.ln())
    })
}

fn fit_core<T: Scalar, G: Fn(T) -> Result<T, TheoryError>>(
    traj: &Trajectory<T>,
    window: (T, T),
    observable: RateObservable<T>,
    regressor: G,
) -> Result<RateFit<T>, TheoryError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for sample in &traj.samples {
        if sample.t < window.0 || sample.t > window.1 {
            continue;
        }
        let v = observable.value(sample);
        if v <= T::zero() {
            return Err(TheoryError::NonPositiveObservable {
                t: to_f64(sample.t),
                value: to_f64(v),
            });
        }
        xs.push(regressor(sample.t)?);
        ys.push(v.ln());
    }
    let n = xs.len();
    if n < 2 {
        return Err(TheoryError::WindowEmpty);
    }

    let nt = crate::scalar::lit_usize::<T>(n);
    let x_mean = xs.iter().fold(T::zero(), |a, &x| a + x) / nt;
    let y_mean = ys.iter().fold(T::zero(), |a, &y| a + y) / nt;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for i in 0..n {
        let dx = xs[i] - x_mean;
        let dy = ys[i] - y_mean;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == T::zero() {
        return Err(TheoryError::WindowEmpty);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res = syy - slope * sxy;
    let r_squared = if syy == T::zero() {
        T::one()
    } else {
        T::one() - ss_res / syy
    };
    Ok(RateFit { slope, intercept, r_squared, samples_used: n })
}
