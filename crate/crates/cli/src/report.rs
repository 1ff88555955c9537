//! Applies the theory checks to a recorded trajectory and reports each one
//! as pass, fail, or not applicable.
//!
//! Selection is automatic: each named check works out from the trajectory
//! itself which bound variant and window apply (depth, initial sign of the
//! top pair product, stage boundaries), so the same selector list is valid
//! for any run. Checks whose premises do not hold are reported as not
//! applicable rather than failed; only genuine violations fail.

use serde::{Deserialize, Serialize};

use linflow::model::{Trajectory, TargetSpec};
use linflow::theory::{
    bound_params, detect_stages, monitor_invariants, predict_limit, slice_window, verify_bounds,
    BoundParams, BoundSelector, BoundSlack, DerivSource, PredictionKind, Stage3Variant,
    TheoryError,
};

use crate::CliError;

/// Per-sample violation budget for the runtime invariant monitors on flow
/// trajectories.
pub const INVARIANT_TOL_FLOW: f64 = 1e-7;
/// Gradient descent moves in discrete steps, so monitored quantities may
/// backtrack by the squared step scale between records.
pub const INVARIANT_TOL_GD: f64 = 1e-4;
/// Alignment level below which the top pair product counts as "not yet
/// positive" when choosing a stage window start.
const C1_LIVE: f64 = 1e-6;

pub const ALL_CHECKS: [&str; 7] =
    ["invariants", "envelope", "stage1", "stage2", "stage3", "zero_limit", "t1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
    /// Smallest signed margin over the swept window, where defined.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_margin: Option<f64>,
    /// Violating sample times, capped at ten.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<f64>,
}

impl CheckOutcome {
    fn pass(name: &str, detail: String, margin: Option<f64>) -> Self {
        Self {
            name: name.into(),
            status: CheckStatus::Pass,
            detail,
            worst_margin: margin,
            violations: vec![],
        }
    }

    fn not_applicable(name: &str, reason: String) -> Self {
        Self {
            name: name.into(),
            status: CheckStatus::NotApplicable,
            detail: reason,
            worst_margin: None,
            violations: vec![],
        }
    }
}

pub fn is_known_selector(name: &str) -> bool {
    name == "all" || ALL_CHECKS.contains(&name)
}

/// Expands `all` and validates selector names.
pub fn resolve_selectors(requested: &[String]) -> Result<Vec<&'static str>, CliError> {
    let mut out: Vec<&'static str> = Vec::new();
    for name in requested {
        if name == "all" {
            for c in ALL_CHECKS {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
            continue;
        }
        match ALL_CHECKS.iter().find(|c| *c == name) {
            Some(c) if !out.contains(c) => out.push(c),
            Some(_) => {}
            None => {
                return Err(CliError::Config(format!(
                    "unknown check '{name}' (expected one of: all, {})",
                    ALL_CHECKS.join(", ")
                )))
            }
        }
    }
    Ok(out)
}

/// Runs the selected checks against one trajectory. `is_gd` loosens the
/// invariant tolerance to the descent discretization scale.
pub fn run_checks(
    target: &TargetSpec<f64>,
    depth: usize,
    traj: &Trajectory<f64>,
    selectors: &[&str],
    is_gd: bool,
) -> Result<Vec<CheckOutcome>, CliError> {
    if traj.samples.is_empty() {
        return Err(CliError::Format("trajectory has no samples".into()));
    }
    let mut out = Vec::new();
    for &sel in selectors {
        let outcome = match sel {
            "invariants" => check_invariants(target, traj, is_gd),
            "envelope" => check_envelope(target, depth, traj),
            "zero_limit" => check_zero_limit(target, depth, traj),
            "stage1" => check_stage1(target, depth, traj),
            "stage2" => check_stage2(target, depth, traj),
            "stage3" => check_stage3(target, depth, traj),
            "t1" => check_t1(target, depth, traj),
            other => return Err(CliError::Config(format!("unknown check '{other}'"))),
        };
        out.push(outcome);
    }
    Ok(out)
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|c| c.status != CheckStatus::Fail)
}

fn check_invariants(target: &TargetSpec<f64>, traj: &Trajectory<f64>, is_gd: bool) -> CheckOutcome {
    let tol = if is_gd { INVARIANT_TOL_GD } else { INVARIANT_TOL_FLOW };
    let report = monitor_invariants(target, traj);
    let worst = report.worst();
    if report.passes(tol) {
        CheckOutcome::pass("invariants", format!("worst violation {worst:e}"), Some(-worst))
    } else {
        let failing: Vec<String> = report
            .checks
            .iter()
            .filter(|c| c.max_violation > tol)
            .map(|c| format!("{} ({:e})", c.name, c.max_violation))
            .collect();
        CheckOutcome {
            name: "invariants".into(),
            status: CheckStatus::Fail,
            detail: failing.join(", "),
            worst_margin: Some(-worst),
            violations: report
                .checks
                .iter()
                .filter_map(|c| c.first_violation_time)
                .take(10)
                .collect(),
        }
    }
}

/// Bound parameters from a window's first sample; cancelled top pairs fall
/// back to the scale-only form, which still carries every envelope constant.
fn params_at(
    target: &TargetSpec<f64>,
    depth: usize,
    traj: &Trajectory<f64>,
) -> Result<BoundParams<f64>, TheoryError> {
    let first = traj.first().state();
    match bound_params(target, &first, depth) {
        Ok(p) => Ok(p),
        Err(TheoryError::DegenerateIndicator) => {
            BoundParams::scale_only(target, first.s, depth)
        }
        Err(e) => Err(e),
    }
}

/// Converts a bound sweep into an outcome, folding the per-curve reports.
fn sweep(
    name: &str,
    params: &BoundParams<f64>,
    window: &Trajectory<f64>,
    selector: BoundSelector,
) -> CheckOutcome {
    match verify_bounds(window, params, &[selector], &BoundSlack::default()) {
        Ok(reports) => {
            let worst = reports
                .iter()
                .map(|r| r.worst_margin)
                .fold(f64::INFINITY, f64::min);
            let fails: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if fails.is_empty() {
                let curves: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
                CheckOutcome::pass(
                    name,
                    format!("{} on [{:.3}, {:.3}]", curves.join(", "), window.first().t, window.last().t),
                    Some(worst),
                )
            } else {
                let times: Vec<f64> = reports
                    .iter()
                    .flat_map(|r| r.violations.iter().map(|v| v.t))
                    .take(10)
                    .collect();
                CheckOutcome {
                    name: name.into(),
                    status: CheckStatus::Fail,
                    detail: format!("violated: {}", fails.join(", ")),
                    worst_margin: Some(worst),
                    violations: times,
                }
            }
        }
        Err(TheoryError::NotApplicable { reason }) => CheckOutcome::not_applicable(name, reason),
        Err(TheoryError::WindowEmpty) => {
            CheckOutcome::not_applicable(name, "window contains no samples".into())
        }
        Err(e) => CheckOutcome::not_applicable(name, e.to_string()),
    }
}

fn check_envelope(target: &TargetSpec<f64>, depth: usize, traj: &Trajectory<f64>) -> CheckOutcome {
    match params_at(target, depth, traj) {
        Ok(p) => sweep("envelope", &p, traj, BoundSelector::ScaleEnvelope),
        Err(e) => CheckOutcome::not_applicable("envelope", e.to_string()),
    }
}

fn check_zero_limit(
    target: &TargetSpec<f64>,
    depth: usize,
    traj: &Trajectory<f64>,
) -> CheckOutcome {
    let first = traj.first().state();
    match predict_limit(target, &first) {
        Ok(p) if p.kind == PredictionKind::Zero => {}
        Ok(_) => {
            return CheckOutcome::not_applicable(
                "zero_limit",
                "run does not converge to the zero matrix".into(),
            )
        }
        Err(e) => return CheckOutcome::not_applicable("zero_limit", e.to_string()),
    }
    match BoundParams::scale_only(target, first.s, depth) {
        Ok(p) => sweep("zero_limit", &p, traj, BoundSelector::ZeroLimitUpper),
        Err(e) => CheckOutcome::not_applicable("zero_limit", e.to_string()),
    }
}

fn check_stage1(target: &TargetSpec<f64>, depth: usize, traj: &Trajectory<f64>) -> CheckOutcome {
    if traj.first().c1() >= 0.0 {
        return CheckOutcome::not_applicable("stage1", "top pair product starts nonnegative".into());
    }
    let stages = match detect_stages(traj, DerivSource::FiniteDifference, 1e-8) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::not_applicable("stage1", e.to_string()),
    };
    let Some(t1) = stages.t1 else {
        return CheckOutcome::not_applicable(
            "stage1",
            "top pair product never becomes nonnegative in the recorded window".into(),
        );
    };
    let window = slice_window(traj, traj.first().t, t1);
    match params_at(target, depth, traj) {
        Ok(p) => sweep("stage1", &p, &window, BoundSelector::Stage1Lower),
        Err(e) => CheckOutcome::not_applicable("stage1", e.to_string()),
    }
}

fn check_stage2(target: &TargetSpec<f64>, depth: usize, traj: &Trajectory<f64>) -> CheckOutcome {
    // The polynomial growth floor needs a clearly live top product; start
    // the window at the first such sample.
    let Some(start) = traj.samples.iter().find(|s| s.c1() > C1_LIVE) else {
        return CheckOutcome::not_applicable(
            "stage2",
            "top pair product never exceeds the live threshold".into(),
        );
    };
    let window = slice_window(traj, start.t, traj.last().t);
    let params = match params_at(target, depth, &window) {
        Ok(p) => p,
        Err(e) => return CheckOutcome::not_applicable("stage2", e.to_string()),
    };
    if depth >= 3 {
        sweep("stage2", &params, &window, BoundSelector::Stage2Lower)
    } else {
        // Two layers have no polynomial regime; the combined two-layer curve
        // covers the same window.
        sweep(
            "stage2",
            &params,
            &window,
            BoundSelector::Stage3(Stage3Variant::N2Stage23),
        )
    }
}

fn check_stage3(target: &TargetSpec<f64>, depth: usize, traj: &Trajectory<f64>) -> CheckOutcome {
    let stages = match detect_stages(traj, DerivSource::FiniteDifference, 1e-8) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::not_applicable("stage3", e.to_string()),
    };
    let (window, variant) = match stages.t2 {
        Some(t2) => {
            let Some(start) = traj.samples.iter().find(|s| s.t >= t2 && s.c1() > 0.0) else {
                return CheckOutcome::not_applicable(
                    "stage3",
                    "no aligned samples past the scale crossing".into(),
                );
            };
            let w = slice_window(traj, start.t, traj.last().t);
            let v = if depth >= 3 { Stage3Variant::Stage3 } else { Stage3Variant::N2Stage3 };
            (w, v)
        }
        None => {
            // No crossing recorded: the exponential regime still covers the
            // whole run when the scale starts at or above its limit.
            let first = traj.first();
            if first.c1() <= 0.0 || first.s < target.s1() {
                return CheckOutcome::not_applicable(
                    "stage3",
                    "scale never crosses the alignment and does not start above its limit".into(),
                );
            }
            let w = traj.clone();
            let v = if depth >= 3 { Stage3Variant::Stage2p5 } else { Stage3Variant::N2T2Inf };
            (w, v)
        }
    };
    let params = match params_at(target, depth, &window) {
        Ok(p) => p,
        Err(e) => return CheckOutcome::not_applicable("stage3", e.to_string()),
    };
    sweep("stage3", &params, &window, BoundSelector::Stage3(variant))
}

/// Sign-fixing deadline: every sample later than the closed-form alignment
/// time must show a nonnegative top pair product.
fn check_t1(target: &TargetSpec<f64>, depth: usize, traj: &Trajectory<f64>) -> CheckOutcome {
    if traj.first().c1() >= 0.0 {
        return CheckOutcome::not_applicable("t1", "top pair product starts nonnegative".into());
    }
    // The closed forms assume the slowdown factor stays at or above one,
    // which holds once the top singular value is at least one.
    if target.s1() < 1.0 {
        return CheckOutcome::not_applicable(
            "t1",
            format!("s1 = {} < 1 is outside the deadline's validity domain", target.s1()),
        );
    }
    let params = match params_at(target, depth, traj) {
        Ok(p) => p,
        Err(e) => return CheckOutcome::not_applicable("t1", e.to_string()),
    };
    let (deadline, name) = if depth >= 3 {
        match params.t1_upper {
            Some(t) => (t, "deep deadline"),
            None => {
                return CheckOutcome::not_applicable(
                    "t1",
                    "no finite deadline for this start".into(),
                )
            }
        }
    } else {
        match params.t1_upper_two {
            Some(t) => (t, "two-layer deadline"),
            None => {
                return CheckOutcome::not_applicable(
                    "t1",
                    "no finite deadline for this start".into(),
                )
            }
        }
    };
    let t0 = traj.first().t;
    let late: Vec<&linflow::model::Sample<f64>> = traj
        .samples
        .iter()
        .filter(|s| s.t - t0 > deadline * (1.0 + 1e-6) + 1e-9)
        .collect();
    if late.is_empty() {
        return CheckOutcome::not_applicable(
            "t1",
            format!("run ends before the {name} {deadline:.4}"),
        );
    }
    let worst = late.iter().map(|s| s.c1()).fold(f64::INFINITY, f64::min);
    let bad: Vec<f64> =
        late.iter().filter(|s| s.c1() < -1e-9).map(|s| s.t).take(10).collect();
    if bad.is_empty() {
        CheckOutcome::pass(
            "t1",
            format!("aligned by the {name} {deadline:.4}"),
            Some(worst),
        )
    } else {
        CheckOutcome {
            name: "t1".into(),
            status: CheckStatus::Fail,
            detail: format!("top pair product still negative after the {name} {deadline:.4}"),
            worst_margin: Some(worst),
            violations: bad,
        }
    }
}

// ---------------------------------------------------------------------------
// Report file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<LabeledChecks>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Check outcomes for one trajectory (`flow` or `gd`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledChecks {
    pub run: String,
    pub outcomes: Vec<CheckOutcome>,
}

/// Sup-norm deviation between the flow and descent runs on the observables,
/// compared at the descent sample times via linear interpolation of the
/// flow run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub sup_s: f64,
    pub sup_q: f64,
    /// Time horizon shared by the two runs.
    pub t_common: f64,
}

pub fn compare_runs(flow: &Trajectory<f64>, gd: &Trajectory<f64>) -> Option<Comparison> {
    let t_common = flow.last().t.min(gd.last().t);
    let mut sup_s: f64 = 0.0;
    let mut sup_q: f64 = 0.0;
    let mut seen = false;
    for g in gd.samples.iter().filter(|s| s.t <= t_common) {
        let (s, q) = interpolate(flow, g.t)?;
        sup_s = sup_s.max((g.s - s).abs());
        sup_q = sup_q.max((g.q - q).abs());
        seen = true;
    }
    seen.then_some(Comparison { sup_s, sup_q, t_common })
}

fn interpolate(traj: &Trajectory<f64>, t: f64) -> Option<(f64, f64)> {
    let samples = &traj.samples;
    if samples.is_empty() || t < samples[0].t || t > samples[samples.len() - 1].t {
        return None;
    }
    let idx = samples.partition_point(|s| s.t < t);
    if idx == 0 {
        return Some((samples[0].s, samples[0].q));
    }
    let (lo, hi) = (&samples[idx - 1], &samples[idx.min(samples.len() - 1)]);
    if hi.t == lo.t {
        return Some((hi.s, hi.q));
    }
    let w = (t - lo.t) / (hi.t - lo.t);
    Some((lo.s + w * (hi.s - lo.s), lo.q + w * (hi.q - lo.q)))
}
