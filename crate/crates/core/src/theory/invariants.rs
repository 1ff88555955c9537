//! Runtime monitors for the conserved signs and monotone observables of the
//! reduced flow.
//!
//! Each monitor reports the worst violation it saw and when it first saw
//! one; deciding whether a violation matters (discretization noise versus a
//! corrupted run) is the caller's job. All magnitudes are nonnegative and
//! zero means the invariant held exactly.

use crate::model::{TargetSpec, Trajectory};
use crate::scalar::{lit, Scalar};

use super::predict::INDICATOR_TOL;

/// One monitored invariant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantCheck<T: Scalar> {
    pub name: &'static str,
    /// Largest violation magnitude over the run (zero when it held).
    pub max_violation: T,
    /// Sample time of the first strictly positive violation.
    pub first_violation_time: Option<T>,
}

/// Results of all monitors over one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport<T: Scalar> {
    pub checks: Vec<InvariantCheck<T>>,
}

impl<T: Scalar> InvariantReport<T> {
    /// Largest violation across all monitors.
    pub fn worst(&self) -> T {
        self.checks
            .iter()
            .fold(T::zero(), |acc, c| acc.max(c.max_violation))
    }

    /// True when every monitor stayed at or below `tol`.
    pub fn passes(&self, tol: T) -> bool {
        self.checks.iter().all(|c| c.max_violation <= tol)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck<T>> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Monitor<T: Scalar> {
    name: &'static str,
    max_violation: T,
    first_violation_time: Option<T>,
}

impl<T: Scalar> Monitor<T> {
    fn new(name: &'static str) -> Self {
        Self { name, max_violation: T::zero(), first_violation_time: None }
    }

    fn observe(&mut self, violation: T, t: T) {
        if violation > T::zero() && self.first_violation_time.is_none() {
            self.first_violation_time = Some(t);
        }
        self.max_violation = self.max_violation.max(violation);
    }

    fn into_check(self) -> InvariantCheck<T> {
        InvariantCheck {
            name: self.name,
            max_violation: self.max_violation,
            first_violation_time: self.first_violation_time,
        }
    }
}

/// Monitors the five structural invariants of the reduced flow over a
/// recorded run:
///
/// * `s_sign`: the scale never changes sign (violation: excursion past zero
///   on the wrong side, or `|s|` itself when the run started at zero);
/// * `q_monotone`: the alignment `q` never decreases between consecutive
///   samples (violation: size of the decrease);
/// * `q1_monotone`: same for the top-pair alignment `q_1`;
/// * `indicator_signs`: each coefficient sum `a_i + b_i` keeps its initial
///   sign; sums starting within [`INDICATOR_TOL`] of zero must stay within
///   it (violation: wrong-signed magnitude, or the excess over the
///   tolerance for cancelled pairs);
/// * `active_indicator_growth`: the first non-cancelled in-rank sum
///   `|a_{k+1} + b_{k+1}|` never decreases (violation: size of the
///   decrease). Reported as zero when every in-rank pair is cancelled.
///
/// An empty trajectory yields a report in which everything trivially holds.
pub fn monitor_invariants<T: Scalar>(
    target: &TargetSpec<T>,
    traj: &Trajectory<T>,
) -> InvariantReport<T> {
    let mut s_sign = Monitor::new("s_sign");
    let mut q_mono = Monitor::new("q_monotone");
    let mut q1_mono = Monitor::new("q1_monotone");
    let mut ind_signs = Monitor::new("indicator_signs");
    let mut active_growth = Monitor::new("active_indicator_growth");

    if traj.is_empty() {
        return InvariantReport {
            checks: vec![
                s_sign.into_check(),
                q_mono.into_check(),
                q1_mono.into_check(),
                ind_signs.into_check(),
                active_growth.into_check(),
            ],
        };
    }

    let tol = lit::<T>(INDICATOR_TOL);
    let first = traj.first();
    let n_pairs = first.a.len().min(first.b.len());
    let d = target.d().min(n_pairs);

    let s0 = first.s;
    // Initial sign of each coefficient sum; zero marks a cancelled pair.
    let sign0: Vec<T> = (0..n_pairs)
        .map(|i| {
            let v = first.a[i] + first.b[i];
            if v.abs() <= tol {
                T::zero()
            } else {
                v.signum()
            }
        })
        .collect();
    // First live in-rank pair, if any.
    let active = (0..d).find(|&i| sign0[i] != T::zero());

    for sample in &traj.samples {
        let t = sample.t;
        let sv = if s0 == T::zero() {
            sample.s.abs()
        } else {
            (-s0.signum() * sample.s).max(T::zero())
        };
        s_sign.observe(sv, t);

        for (i, &sg) in sign0.iter().enumerate() {
            let ind = sample.a[i] + sample.b[i];
            let v = if sg == T::zero() {
                (ind.abs() - tol).max(T::zero())
            } else {
                (-sg * ind).max(T::zero())
            };
            ind_signs.observe(v, t);
        }
    }

    for pair in traj.samples.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        q_mono.observe((prev.q - cur.q).max(T::zero()), cur.t);
        q1_mono.observe((prev.q1 - cur.q1).max(T::zero()), cur.t);
        if let Some(i) = active {
            let before = (prev.a[i] + prev.b[i]).abs();
            let after = (cur.a[i] + cur.b[i]).abs();
            active_growth.observe((before - after).max(T::zero()), cur.t);
        }
    }

    InvariantReport {
        checks: vec![
            s_sign.into_check(),
            q_mono.into_check(),
            q1_mono.into_check(),
            ind_signs.into_check(),
            active_growth.into_check(),
        ],
    }
}
