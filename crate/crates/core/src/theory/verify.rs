//! Sweeps recorded trajectories against the closed-form bounds and reports
//! every sample that lands on the wrong side.
//!
//! The caller picks the window (typically by slicing at the stage
//! boundaries from [`super::detect_stages`]) and computes [`BoundParams`]
//! from the window's first state; the curves are then evaluated in time
//! elapsed since that first sample. A small absolute-plus-relative slack
//! absorbs discretization error; margins are reported raw so the caller
//! can see how close a pass was.

use crate::model::{Sample, Trajectory};
use crate::scalar::{lit, Scalar};

use super::bounds::{
    s_envelope, stage1_lower, stage2_lower, stage3_bounds, zero_limit_upper, BoundParams,
    Stage3Variant,
};
use super::TheoryError;

/// Which bound family to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSelector {
    /// Whole-run scale envelope (two curves: floor and ceiling).
    ScaleEnvelope,
    /// Sign-fixing alignment floor for misaligned deep starts.
    Stage1Lower,
    /// Polynomial alignment growth floor for aligned deep starts.
    Stage2Lower,
    /// Exponential-regime curves (three: alignment floor, scale floor,
    /// scale ceiling).
    Stage3(Stage3Variant),
    /// Scale ceiling for runs converging to the zero matrix.
    ZeroLimitUpper,
}

/// Allowed crossing before a sample counts as a violation:
/// `abs + rel * |bound|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSlack<T: Scalar> {
    pub abs: T,
    pub rel: T,
}

impl<T: Scalar> Default for BoundSlack<T> {
    fn default() -> Self {
        Self { abs: lit(1e-6), rel: lit(1e-6) }
    }
}

/// One sample on the wrong side of a bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation<T: Scalar> {
    pub t: T,
    pub observed: T,
    pub bound: T,
}

/// Outcome of sweeping one curve over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport<T: Scalar> {
    pub name: String,
    /// First and last sample time of the swept window.
    pub window: (T, T),
    /// Smallest signed margin seen (observed minus bound for floors, bound
    /// minus observed for ceilings); negative values within the slack are
    /// tolerated.
    pub worst_margin: T,
    pub violations: Vec<BoundViolation<T>>,
}

impl<T: Scalar> BoundReport<T> {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Restricts a trajectory to the samples with `t_lo <= t <= t_hi`.
pub fn slice_window<T: Scalar>(traj: &Trajectory<T>, t_lo: T, t_hi: T) -> Trajectory<T> {
    Trajectory {
        samples: traj
            .samples
            .iter()
            .filter(|s| s.t >= t_lo && s.t <= t_hi)
            .cloned()
            .collect(),
        meta: traj.meta.clone(),
    }
}

enum Dir {
    Lower,
    Upper,
}

enum Obs {
    Scale,
    TopAlignment,
}

struct Curve {
    name: String,
    dir: Dir,
    obs: Obs,
}

fn variant_tag(v: Stage3Variant) -> &'static str {
    match v {
        Stage3Variant::Stage3 => "stage3",
        Stage3Variant::Stage2p5 => "stage2_5",
        Stage3Variant::N2Stage23 => "n2_stage23",
        Stage3Variant::N2Stage3 => "n2_stage3",
        Stage3Variant::N2T2Inf => "n2_t2_inf",
    }
}

fn curves(sel: BoundSelector) -> Vec<Curve> {
    match sel {
        BoundSelector::ScaleEnvelope => vec![
            Curve { name: "s_envelope_lower".into(), dir: Dir::Lower, obs: Obs::Scale },
            Curve { name: "s_envelope_upper".into(), dir: Dir::Upper, obs: Obs::Scale },
        ],
        BoundSelector::Stage1Lower => vec![Curve {
            name: "stage1_c1_lower".into(),
            dir: Dir::Lower,
            obs: Obs::TopAlignment,
        }],
        BoundSelector::Stage2Lower => vec![Curve {
            name: "stage2_c1_lower".into(),
            dir: Dir::Lower,
            obs: Obs::TopAlignment,
        }],
        BoundSelector::Stage3(v) => {
            let tag = variant_tag(v);
            vec![
                Curve { name: format!("{tag}_c1_lower"), dir: Dir::Lower, obs: Obs::TopAlignment },
                Curve { name: format!("{tag}_s_lower"), dir: Dir::Lower, obs: Obs::Scale },
                Curve { name: format!("{tag}_s_upper"), dir: Dir::Upper, obs: Obs::Scale },
            ]
        }
        BoundSelector::ZeroLimitUpper => vec![Curve {
            name: "zero_limit_upper".into(),
            dir: Dir::Upper,
            obs: Obs::Scale,
        }],
    }
}

fn eval<T: Scalar>(
    sel: BoundSelector,
    idx: usize,
    p: &BoundParams<T>,
    tau: T,
) -> Result<T, TheoryError> {
    Ok(match sel {
        BoundSelector::ScaleEnvelope => {
            let (lo, hi) = s_envelope(p, tau);
            if idx == 0 { lo } else { hi }
        }
        BoundSelector::Stage1Lower => stage1_lower(p, tau)?,
        BoundSelector::Stage2Lower => stage2_lower(p, tau)?,
        BoundSelector::Stage3(v) => {
            let (c1, s_lo, s_hi) = stage3_bounds(p, tau, v)?;
            match idx {
                0 => c1,
                1 => s_lo,
                _ => s_hi,
            }
        }
        BoundSelector::ZeroLimitUpper => zero_limit_upper(p.s0_init, p.depth, tau),
    })
}

fn observe<T: Scalar>(obs: &Obs, s: &Sample<T>) -> T {
    match obs {
        Obs::Scale => s.s,
        Obs::TopAlignment => s.c1(),
    }
}

/// Sweeps the selected bounds over the passed window.
///
/// `params` must have been computed from the window's first state (the
/// curves are evaluated at `t - window_start`). Returns one report per
/// curve, in selector order; a selector whose bound does not apply to these
/// parameters propagates [`TheoryError::NotApplicable`].
pub fn verify_bounds<T: Scalar>(
    traj: &Trajectory<T>,
    params: &BoundParams<T>,
    which: &[BoundSelector],
    slack: &BoundSlack<T>,
) -> Result<Vec<BoundReport<T>>, TheoryError> {
    if traj.is_empty() {
        return Err(TheoryError::WindowEmpty);
    }
    let t0 = traj.first().t;
    let t_end = traj.last().t;
    let mut out = Vec::new();
    for &sel in which {
        for (idx, curve) in curves(sel).into_iter().enumerate() {
            let mut worst: Option<T> = None;
            let mut violations = Vec::new();
            for sample in &traj.samples {
                let tau = sample.t - t0;
                let bound = eval(sel, idx, params, tau)?;
                let x = observe(&curve.obs, sample);
                let margin = match curve.dir {
                    Dir::Lower => x - bound,
                    Dir::Upper => bound - x,
                };
                worst = Some(worst.map_or(margin, |w| w.min(margin)));
                if margin < -(slack.abs + slack.rel * bound.abs()) {
                    violations.push(BoundViolation { t: sample.t, observed: x, bound });
                }
            }
            out.push(BoundReport {
                name: curve.name.clone(),
                window: (t0, t_end),
                worst_margin: worst.expect("window has samples"),
                violations,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_coords, IntegratorConfig};
    use crate::init::{k_cancel_directions, KCancelSpec};
    use crate::model::{target_from_factors, CoordState, TargetSpec};
    use crate::rng::{random_orthogonal, seeded};
    use crate::theory::{bound_params, detect_stages, DerivSource};
    use nalgebra::DVector;

    fn target() -> TargetSpec<f64> {
        let mut rng = seeded(51, "verify-target");
        target_from_factors(
            random_orthogonal(&mut rng, 3),
            DVector::from_vec(vec![2.0, 1.0]),
            random_orthogonal(&mut rng, 3),
            &Default::default(),
        )
        .unwrap()
    }

    fn run(target: &TargetSpec<f64>, state: CoordState<f64>, depth: usize, t_max: f64) -> Trajectory<f64> {
        let cfg = IntegratorConfig { t_max, ..Default::default() };
        integrate_coords(target, &state, depth, &cfg).unwrap()
    }

    #[test]
    fn staged_windows_of_a_real_run_respect_their_bounds() {
        let target = target();
        let depth = 3;
        let a = DVector::from_vec(vec![0.4, 0.2, f64::sqrt(1.0 - 0.16 - 0.04)]);
        let b = DVector::from_vec(vec![-0.35, 0.25, f64::sqrt(1.0 - 0.1225 - 0.0625)]);
        let traj = run(&target, CoordState::new(3.0, a, b), depth, 40.0);
        let stages = detect_stages(&traj, DerivSource::FiniteDifference, 1e-8).unwrap();
        let t1 = stages.t1.unwrap();
        let t2 = stages.t2.unwrap();

        // Whole run: envelope from the initial state.
        let p0 = bound_params(&target, &traj.first().state(), depth).unwrap();
        let whole =
            verify_bounds(&traj, &p0, &[BoundSelector::ScaleEnvelope], &Default::default())
                .unwrap();
        assert_eq!(whole.len(), 2);
        for r in &whole {
            assert!(r.passed(), "{}: worst margin {:e}", r.name, r.worst_margin);
        }

        // Sign-fixing window.
        let w1 = slice_window(&traj, traj.first().t, t1);
        let r1 = verify_bounds(&w1, &p0, &[BoundSelector::Stage1Lower], &Default::default())
            .unwrap();
        assert!(r1[0].passed(), "stage1: worst margin {:e}", r1[0].worst_margin);

        // Post-crossing window: all three exponential curves.
        let start = traj
            .samples
            .iter()
            .find(|s| s.t > t2 && s.c1() > 0.0)
            .expect("run continues past t2")
            .t;
        let w3 = slice_window(&traj, start, traj.last().t);
        let p3 = bound_params(&target, &w3.first().state(), depth).unwrap();
        let r3 = verify_bounds(
            &w3,
            &p3,
            &[BoundSelector::Stage3(Stage3Variant::Stage3)],
            &Default::default(),
        )
        .unwrap();
        assert_eq!(r3.len(), 3);
        for r in &r3 {
            assert!(r.passed(), "{}: worst margin {:e}", r.name, r.worst_margin);
            assert_eq!(r.window, (start, traj.last().t));
        }
    }

    #[test]
    fn aligned_small_scale_runs_respect_the_growth_floor() {
        // The polynomial growth floor leans only on the universal scale
        // envelope, so it applies to the whole run of any aligned start.
        let target = target();
        let a = DVector::from_vec(vec![0.5, 0.1, f64::sqrt(1.0 - 0.25 - 0.01)]);
        let b = DVector::from_vec(vec![0.45, -0.2, f64::sqrt(1.0 - 0.2025 - 0.04)]);
        let traj = run(&target, CoordState::new(0.05, a, b), 3, 30.0);
        let p = bound_params(&target, &traj.first().state(), 3).unwrap();
        let reports = verify_bounds(
            &traj,
            &p,
            &[BoundSelector::Stage2Lower, BoundSelector::ScaleEnvelope],
            &Default::default(),
        )
        .unwrap();
        for r in &reports {
            assert!(r.passed(), "{}: worst margin {:e}", r.name, r.worst_margin);
        }
    }

    #[test]
    fn cancelled_runs_respect_the_zero_limit_ceiling() {
        let target = target();
        let spec = KCancelSpec { k: 2, rho: None, seed: 9, s0: 1.0 };
        let init = k_cancel_directions(&target, &spec).unwrap();
        let traj = run(&target, init.state, 3, 20.0);
        let p = BoundParams::scale_only(&target, traj.first().s, 3).unwrap();
        let reports =
            verify_bounds(&traj, &p, &[BoundSelector::ZeroLimitUpper], &Default::default())
                .unwrap();
        assert!(reports[0].passed(), "worst margin {:e}", reports[0].worst_margin);
        // The ceiling is tight-ish: the run must actually approach it from
        // below rather than sit at a fraction of it.
        assert!(reports[0].worst_margin < 1.0);
    }

    #[test]
    fn corrupted_samples_are_reported_with_their_time_and_values() {
        let target = target();
        let a = DVector::from_vec(vec![0.5, 0.1, f64::sqrt(1.0 - 0.25 - 0.01)]);
        let b = DVector::from_vec(vec![0.45, -0.2, f64::sqrt(1.0 - 0.2025 - 0.04)]);
        let mut traj = run(&target, CoordState::new(0.5, a, b), 3, 10.0);
        let mid = traj.samples.len() / 2;
        traj.samples[mid].s += 10.0;
        let p = bound_params(&target, &traj.first().state(), 3).unwrap();
        let reports =
            verify_bounds(&traj, &p, &[BoundSelector::ScaleEnvelope], &Default::default())
                .unwrap();
        let upper = reports.iter().find(|r| r.name == "s_envelope_upper").unwrap();
        assert!(!upper.passed());
        assert_eq!(upper.violations.len(), 1);
        let v = &upper.violations[0];
        assert_eq!(v.t, traj.samples[mid].t);
        assert!(v.observed > 10.0 && v.bound == 2.0);
        assert!(upper.worst_margin < -8.0);
    }

    #[test]
    fn empty_windows_and_inapplicable_selectors_error() {
        let target = target();
        let a = DVector::from_vec(vec![0.5, 0.1, f64::sqrt(1.0 - 0.25 - 0.01)]);
        let b = DVector::from_vec(vec![0.45, -0.2, f64::sqrt(1.0 - 0.2025 - 0.04)]);
        let traj = run(&target, CoordState::new(0.5, a.clone(), b.clone()), 3, 2.0);
        let p = bound_params(&target, &traj.first().state(), 3).unwrap();

        let empty = slice_window(&traj, 100.0, 200.0);
        assert!(matches!(
            verify_bounds(&empty, &p, &[BoundSelector::ScaleEnvelope], &Default::default()),
            Err(TheoryError::WindowEmpty)
        ));
        // Aligned start: the misaligned-start bound refuses.
        assert!(matches!(
            verify_bounds(&traj, &p, &[BoundSelector::Stage1Lower], &Default::default()),
            Err(TheoryError::NotApplicable { .. })
        ));
    }
}
