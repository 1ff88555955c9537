//! Time integration of the reduced flow and of the induced-weight flow.
//!
//! The default method is an adaptive Dormand-Prince 5(4) pair. Runs that
//! must be byte-reproducible across configurations can use fixed-step
//! classical RK4 instead.
//!
//! Two properties of the reduced-flow loop are deliberate and load-bearing:
//!
//! * Coefficient pairs with `b_i == -a_i` stay mirrored **bitwise** for the
//!   whole run. The right-hand side and the stage combinations only use
//!   sign-symmetric IEEE operations, and renormalization restores the mirror
//!   afterwards. Any relative asymmetry, however small, grows like
//!   `exp(rate * t)` near a saddle and would eject the trajectory long
//!   before a convergence stop can fire.
//! * Renormalization of `a` and `b` happens once per accepted step, and a
//!   trial step is rejected when the pre-renormalization norm drift exceeds
//!   `tangency_budget`, which keeps `|a . da|` per step at the 1e-9 scale.

use nalgebra::{DMatrix, DVector};

use crate::model::{
    loss_from_coords, loss_from_matrix, observables, CoordState, RunEnd, Sample, TargetSpec,
    Trajectory, TrajectoryMeta,
};
use crate::scalar::{lit, to_f64, Scalar};

use super::{induced_rhs_rank_one, is_finite_scalar, rhs_coords_raw, DynamicsError};

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method<T: Scalar> {
    /// Adaptive Dormand-Prince 5(4).
    Rk45,
    /// Classical fixed-step RK4 (no error control, no tangency rejection).
    Rk4Fixed { dt: T },
}

/// Stage boundaries the integrator can halt on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageEvent {
    /// First alignment coefficient product `a_1 b_1` becomes nonnegative.
    AbNonneg,
    /// Alignment `q` reaches the scale `s`.
    QReachesS,
}

/// Early-stop rule, checked after every accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCondition<T: Scalar> {
    /// Derivative sup norm at the new point drops to `eps` or below.
    Converged { eps: T },
    /// Scale drops to `eps` or below.
    SBelow { eps: T },
    /// A stage boundary is crossed (or already holds at the start).
    Stage(StageEvent),
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig<T: Scalar> {
    pub method: Method<T>,
    pub t_max: T,
    pub rtol: T,
    pub atol: T,
    pub dt_init: T,
    /// Hard lower bound on the adaptive step; a relative floor of
    /// `1e-14 * max(|t|, 1)` applies on top of it.
    pub dt_min: T,
    pub dt_max: T,
    /// Largest allowed pre-renormalization drift of `||a||^2 - 1` per step.
    pub tangency_budget: T,
    /// Scales below this end the run with [`RunEnd::ConvergedToZero`].
    pub s_floor: T,
    /// Stop conditions, checked in order after every accepted step; the
    /// first one that holds ends the run.
    pub stops: Vec<StopCondition<T>>,
    pub max_steps: usize,
    /// Recorded-sample budget; regular records are thinned (stride doubling)
    /// to stay under it. Requested times are never thinned.
    pub max_samples: usize,
    /// Times to land on exactly and record, strictly increasing.
    pub record_at: Vec<T>,
}

impl<T: Scalar> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            t_max: lit(100.0),
            rtol: lit(1e-8),
            atol: lit(1e-10),
            dt_init: lit(1e-3),
            dt_min: T::zero(),
            dt_max: lit(1e-2),
            tangency_budget: lit(2e-9),
            s_floor: lit(1e-10),
            stops: Vec::new(),
            max_steps: 20_000_000,
            max_samples: 65_536,
            record_at: Vec::new(),
        }
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// Difference between the 5th- and 4th-order weights (error estimate).
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// `y + dt * sum(c_i k_i)`, component-wise (sign-symmetric).
fn combine<T: Scalar>(y: &DVector<T>, dt: T, coeffs: &[f64], ks: &[&DVector<T>]) -> DVector<T> {
    let mut out = y.clone();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c != 0.0 {
            out.axpy(dt * lit(*c), *k, T::one());
        }
    }
    out
}

pub(crate) struct TrialStep<T: Scalar> {
    pub(crate) y_new: DVector<T>,
    pub(crate) k_new: DVector<T>,
    pub(crate) err_ratio: T,
}

/// One Dormand-Prince trial step. `k_new` is the derivative at the proposed
/// new point (the first-same-as-last evaluation), reused for stop checks.
pub(crate) fn dp45_trial<T: Scalar, F: FnMut(T, &DVector<T>) -> DVector<T>>(
    f: &mut F,
    t: T,
    y: &DVector<T>,
    k1: &DVector<T>,
    dt: T,
    atol: T,
    rtol: T,
) -> TrialStep<T> {
    let k2 = f(t + dt * lit(C[1]), &combine(y, dt, &A2, &[k1]));
    let k3 = f(t + dt * lit(C[2]), &combine(y, dt, &A3, &[k1, &k2]));
    let k4 = f(t + dt * lit(C[3]), &combine(y, dt, &A4, &[k1, &k2, &k3]));
    let k5 = f(t + dt * lit(C[4]), &combine(y, dt, &A5, &[k1, &k2, &k3, &k4]));
    let k6 = f(t + dt * lit(C[5]), &combine(y, dt, &A6, &[k1, &k2, &k3, &k4, &k5]));
    let y_new = combine(y, dt, &B5, &[k1, &k2, &k3, &k4, &k5, &k6]);
    let k_new = f(t + dt, &y_new);

    let zero = DVector::zeros(y.len());
    let err = combine(&zero, dt, &E, &[k1, &k2, &k3, &k4, &k5, &k6, &k_new]);
    let mut ratio = T::zero();
    for i in 0..y.len() {
        let scale = atol + rtol * y[i].abs().max(y_new[i].abs());
        ratio = ratio.max(err[i].abs() / scale);
    }
    TrialStep { y_new, k_new, err_ratio: ratio }
}

/// Classical RK4 step.
fn rk4_step<T: Scalar, F: FnMut(T, &DVector<T>) -> DVector<T>>(
    f: &mut F,
    t: T,
    y: &DVector<T>,
    dt: T,
) -> DVector<T> {
    let half = lit::<T>(0.5);
    let k1 = f(t, y);
    let k2 = f(t + dt * half, &combine(y, dt, &[0.5], &[&k1]));
    let k3 = f(t + dt * half, &combine(y, dt, &[0.0, 0.5], &[&k1, &k2]));
    let k4 = f(t + dt, &combine(y, dt, &[0.0, 0.0, 1.0], &[&k1, &k2, &k3]));
    combine(
        y,
        dt,
        &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        &[&k1, &k2, &k3, &k4],
    )
}

/// Step-size update from the scaled error ratio (order-5 controller).
pub(crate) fn next_dt<T: Scalar>(dt: T, err_ratio: T, dt_max: T, rejected: bool) -> T {
    let r = to_f64(err_ratio).max(1e-12);
    let mut fac = 0.9 * r.powf(-0.2);
    fac = fac.clamp(0.2, 5.0);
    if rejected {
        fac = fac.min(1.0);
    }
    (dt * lit(fac)).min(dt_max)
}

/// Shared bookkeeping for recorded samples: regular records are thinned by
/// stride doubling once over budget, forced records are always kept.
struct Recorder<T: Scalar> {
    regular: Vec<Sample<T>>,
    forced: Vec<Sample<T>>,
    stride: usize,
    since_last: usize,
    budget: usize,
}

impl<T: Scalar> Recorder<T> {
    fn new(budget: usize) -> Self {
        Self {
            regular: Vec::new(),
            forced: Vec::new(),
            stride: 1,
            since_last: 0,
            budget: budget.max(8),
        }
    }

    fn record_regular(&mut self, sample: Sample<T>) {
        self.since_last += 1;
        if self.since_last >= self.stride {
            self.regular.push(sample);
            self.since_last = 0;
            if self.regular.len() >= self.budget {
                let mut keep = Vec::with_capacity(self.regular.len() / 2 + 1);
                for (i, s) in self.regular.drain(..).enumerate() {
                    if i % 2 == 0 {
                        keep.push(s);
                    }
                }
                self.regular = keep;
                self.stride *= 2;
            }
        }
    }

    fn record_forced(&mut self, sample: Sample<T>) {
        self.forced.push(sample);
    }

    fn finish(mut self) -> Vec<Sample<T>> {
        self.regular.append(&mut self.forced);
        self.regular
            .sort_by(|x, y| x.t.partial_cmp(&y.t).expect("finite sample times"));
        self.regular.dedup_by(|x, y| x.t == y.t);
        self.regular
    }
}

/// How one family of runs turns the packed state vector into samples and
/// stop-relevant observables.
trait Space<T: Scalar> {
    /// (s, q, a1*b1) at the packed state.
    fn observe(&self, y: &DVector<T>) -> (T, T, T);
    fn sample(&self, t: T, y: &DVector<T>) -> Sample<T>;
    /// Post-acceptance state repair; returns the tangency diagnostic.
    fn repair(&self, y: &mut DVector<T>) -> T;
    /// Pre-acceptance drift that counts against `tangency_budget`.
    fn drift(&self, y: &DVector<T>) -> T;
}

struct CoordSpace<'a, T: Scalar> {
    target: &'a TargetSpec<T>,
    d_y: usize,
    d_x: usize,
}

impl<T: Scalar> CoordSpace<'_, T> {
    fn unpack(&self, y: &DVector<T>) -> CoordState<T> {
        let a = DVector::from_fn(self.d_y, |i, _| y[1 + i]);
        let b = DVector::from_fn(self.d_x, |i, _| y[1 + self.d_y + i]);
        CoordState::new(y[0], a, b)
    }
}

impl<T: Scalar> Space<T> for CoordSpace<'_, T> {
    fn observe(&self, y: &DVector<T>) -> (T, T, T) {
        let d = self.target.d();
        let mut q = T::zero();
        for j in 0..d {
            q += self.target.sv()[j] * y[1 + j] * y[1 + self.d_y + j];
        }
        (y[0], q, y[1] * y[1 + self.d_y])
    }

    fn sample(&self, t: T, y: &DVector<T>) -> Sample<T> {
        let st = self.unpack(y);
        let (q, q1) = observables(self.target, &st);
        Sample {
            t,
            s: st.s,
            q,
            q1,
            loss: loss_from_coords(self.target, &st),
            bal_residual: T::zero(),
            a: st.a,
            b: st.b,
        }
    }

    fn repair(&self, y: &mut DVector<T>) -> T {
        let (d_y, d_x) = (self.d_y, self.d_x);
        let m = d_y.min(d_x);
        let mirrored: Vec<bool> = (0..m).map(|j| y[1 + d_y + j] == -y[1 + j]).collect();
        let mut na2 = T::zero();
        for i in 0..d_y {
            na2 += y[1 + i] * y[1 + i];
        }
        let mut nb2 = T::zero();
        for i in 0..d_x {
            nb2 += y[1 + d_y + i] * y[1 + d_y + i];
        }
        let tangency = (na2 - T::one()).abs().max((nb2 - T::one()).abs()) / lit(2.0);
        let na = na2.sqrt();
        for i in 0..d_y {
            y[1 + i] /= na;
        }
        let nb = nb2.sqrt();
        for i in 0..d_x {
            y[1 + d_y + i] /= nb;
        }
        // Restore exact mirrors; the norm perturbation is second order.
        for (j, m) in mirrored.iter().enumerate() {
            if *m {
                y[1 + d_y + j] = -y[1 + j];
            }
        }
        tangency
    }

    fn drift(&self, y: &DVector<T>) -> T {
        let mut na2 = T::zero();
        for i in 0..self.d_y {
            na2 += y[1 + i] * y[1 + i];
        }
        let mut nb2 = T::zero();
        for i in 0..self.d_x {
            nb2 += y[1 + self.d_y + i] * y[1 + self.d_y + i];
        }
        (na2 - T::one()).abs().max((nb2 - T::one()).abs())
    }
}

struct InducedSpace<'a, T: Scalar> {
    target: &'a TargetSpec<T>,
    d_y: usize,
    d_x: usize,
}

impl<T: Scalar> InducedSpace<'_, T> {
    fn unpack(&self, y: &DVector<T>) -> DMatrix<T> {
        DMatrix::from_column_slice(self.d_y, self.d_x, y.as_slice())
    }

    /// Leading singular triple plus the relative second singular value.
    fn extract(&self, w: &DMatrix<T>) -> (T, DVector<T>, DVector<T>, T) {
        let svd = w.clone().svd(true, true);
        let u_m = svd.u.expect("svd with vectors");
        let v_t = svd.v_t.expect("svd with vectors");
        let mut top = 0;
        let mut second = T::zero();
        for i in 0..svd.singular_values.len() {
            if svd.singular_values[i] > svd.singular_values[top] {
                top = i;
            }
        }
        for i in 0..svd.singular_values.len() {
            if i != top {
                second = second.max(svd.singular_values[i]);
            }
        }
        let s = svd.singular_values[top];
        let mut u = u_m.column(top).into_owned();
        let mut v = v_t.row(top).transpose();
        let mut arg = 0;
        for i in 1..u.len() {
            if u[i].abs() > u[arg].abs() {
                arg = i;
            }
        }
        if u[arg] < T::zero() {
            u.neg_mut();
            v.neg_mut();
        }
        let rel = if s > T::zero() { second / s } else { T::zero() };
        (s, u, v, rel)
    }
}

impl<T: Scalar> Space<T> for InducedSpace<'_, T> {
    fn observe(&self, y: &DVector<T>) -> (T, T, T) {
        let w = self.unpack(y);
        let (s, u, v, _) = self.extract(&w);
        let q = (u.transpose() * self.target.z() * &v)[(0, 0)];
        let a1 = self.target.u_col(0).dot(&u);
        let b1 = self.target.v_col(0).dot(&v);
        (s, q, a1 * b1)
    }

    fn sample(&self, t: T, y: &DVector<T>) -> Sample<T> {
        let w = self.unpack(y);
        let (s, u, v, _) = self.extract(&w);
        let a = self.target.u().transpose() * &u;
        let b = self.target.v().transpose() * &v;
        let st = CoordState::new(s, a.clone(), b.clone());
        let (q, q1) = observables(self.target, &st);
        Sample {
            t,
            s,
            q,
            q1,
            loss: loss_from_matrix(self.target, &w, T::zero()),
            bal_residual: T::zero(),
            a,
            b,
        }
    }

    fn repair(&self, y: &mut DVector<T>) -> T {
        // Truncate to the leading triple so leakage cannot accumulate;
        // report the pre-truncation relative second singular value.
        let w = self.unpack(y);
        let (s, u, v, rel) = self.extract(&w);
        let top = &u * v.transpose() * s;
        y.copy_from(&DVector::from_column_slice(top.as_slice()));
        rel
    }

    fn drift(&self, _y: &DVector<T>) -> T {
        T::zero()
    }
}

fn stop_hit<T: Scalar>(
    stops: &[StopCondition<T>],
    deriv_sup: T,
    s: T,
    q: T,
    c1: T,
) -> Option<RunEnd> {
    for stop in stops {
        let end = match stop {
            StopCondition::Converged { eps } if deriv_sup <= *eps => Some(RunEnd::Converged),
            StopCondition::SBelow { eps } if s <= *eps => Some(RunEnd::SBelow),
            StopCondition::Stage(StageEvent::AbNonneg) if c1 >= T::zero() => {
                Some(RunEnd::StageReached)
            }
            StopCondition::Stage(StageEvent::QReachesS) if q >= s => Some(RunEnd::StageReached),
            _ => None,
        };
        if end.is_some() {
            return end;
        }
    }
    None
}

fn vec_sup<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Generic driver shared by the coordinate and induced integrators.
fn run_loop<T: Scalar, S: Space<T>, F: FnMut(T, &DVector<T>) -> DVector<T>>(
    space: &S,
    mut rhs: F,
    y0: DVector<T>,
    t0: T,
    depth: usize,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>, DynamicsError> {
    if y0.iter().any(|x| !is_finite_scalar(*x)) {
        return Err(DynamicsError::NonFiniteState { t: to_f64(t0) });
    }
    for w in cfg.record_at.windows(2) {
        debug_assert!(w[0] < w[1], "record_at must be strictly increasing");
    }

    let mut recorder = Recorder::new(cfg.max_samples);
    let mut y = y0;
    let mut t = t0;
    let mut steps = 0usize;
    let mut max_tangency = T::zero();
    let mut record_idx = 0usize;
    while record_idx < cfg.record_at.len() && cfg.record_at[record_idx] <= t0 {
        record_idx += 1; // the start time is always recorded
    }

    recorder.record_forced(space.sample(t, &y));

    // Initial stop check so degenerate requests return a one-sample run.
    {
        let k0 = rhs(t, &y);
        let (s, q, c1) = space.observe(&y);
        if s < cfg.s_floor {
            return Ok(finish(recorder, RunEnd::ConvergedToZero, steps, max_tangency, depth));
        }
        if let Some(end) = stop_hit(&cfg.stops, vec_sup(&k0), s, q, c1) {
            return Ok(finish(recorder, end, steps, max_tangency, depth));
        }
    }

    match cfg.method {
        Method::Rk4Fixed { dt } => {
            let needs_deriv = cfg
                .stops
                .iter()
                .any(|s| matches!(s, StopCondition::Converged { .. }));
            while t < cfg.t_max {
                if steps >= cfg.max_steps {
                    return Err(DynamicsError::StepBudgetExhausted { t: to_f64(t), steps });
                }
                let mut step_dt = dt;
                let mut forced = false;
                let mut hit_tmax = false;
                if record_idx < cfg.record_at.len()
                    && cfg.record_at[record_idx] <= cfg.t_max
                    && t + step_dt >= cfg.record_at[record_idx]
                {
                    step_dt = cfg.record_at[record_idx] - t;
                    forced = true;
                }
                if !forced && t + step_dt >= cfg.t_max {
                    step_dt = cfg.t_max - t;
                    hit_tmax = true;
                }
                let y_new = rk4_step(&mut rhs, t, &y, step_dt);
                if y_new.iter().any(|x| !is_finite_scalar(*x)) {
                    return Err(DynamicsError::NonFiniteState { t: to_f64(t) });
                }
                y = y_new;
                t = if forced {
                    cfg.record_at[record_idx]
                } else if hit_tmax {
                    cfg.t_max
                } else {
                    t + step_dt
                };
                if forced {
                    record_idx += 1;
                }
                steps += 1;
                max_tangency = max_tangency.max(space.repair(&mut y));

                let (s, q, c1) = space.observe(&y);
                if forced {
                    recorder.record_forced(space.sample(t, &y));
                } else {
                    recorder.record_regular(space.sample(t, &y));
                }
                if s < cfg.s_floor {
                    recorder.record_forced(space.sample(t, &y));
                    return Ok(finish(recorder, RunEnd::ConvergedToZero, steps, max_tangency, depth));
                }
                // Only Converged stops compare deriv_sup, and those force
                // needs_deriv; the placeholder cannot fire anything.
                let deriv_sup = if needs_deriv { vec_sup(&rhs(t, &y)) } else { T::zero() };
                if let Some(end) = stop_hit(&cfg.stops, deriv_sup, s, q, c1) {
                    recorder.record_forced(space.sample(t, &y));
                    return Ok(finish(recorder, end, steps, max_tangency, depth));
                }
            }
            recorder.record_forced(space.sample(t, &y));
            Ok(finish(recorder, RunEnd::TMaxReached, steps, max_tangency, depth))
        }
        Method::Rk45 => {
            let mut dt_base = cfg.dt_init.min(cfg.dt_max);
            let mut k1 = rhs(t, &y);
            let mut rejected_last = false;
            loop {
                if t >= cfg.t_max {
                    recorder.record_forced(space.sample(t, &y));
                    return Ok(finish(recorder, RunEnd::TMaxReached, steps, max_tangency, depth));
                }
                if steps >= cfg.max_steps {
                    return Err(DynamicsError::StepBudgetExhausted { t: to_f64(t), steps });
                }

                let mut step_dt = dt_base;
                let mut landing = false;
                let mut hit_tmax = false;
                if record_idx < cfg.record_at.len() && cfg.record_at[record_idx] <= cfg.t_max {
                    let remaining = cfg.record_at[record_idx] - t;
                    if step_dt >= remaining {
                        step_dt = remaining;
                        landing = true;
                    }
                }
                if !landing && t + step_dt >= cfg.t_max {
                    step_dt = cfg.t_max - t;
                    hit_tmax = true;
                }
                let dt_floor = (lit::<T>(1e-14) * t.abs().max(T::one())).max(cfg.dt_min);
                if step_dt < dt_floor {
                    // A step collapse while the scale sits under the floor is
                    // the stiff tail of a zero limit, not a failure.
                    let (s, _, _) = space.observe(&y);
                    if s < cfg.s_floor {
                        recorder.record_forced(space.sample(t, &y));
                        return Ok(finish(
                            recorder,
                            RunEnd::ConvergedToZero,
                            steps,
                            max_tangency,
                            depth,
                        ));
                    }
                    return Err(DynamicsError::StepSizeUnderflow {
                        t: to_f64(t),
                        dt: to_f64(step_dt),
                    });
                }

                let trial = dp45_trial(&mut rhs, t, &y, &k1, step_dt, cfg.atol, cfg.rtol);
                let drift = space.drift(&trial.y_new);
                let budget_ratio = drift / cfg.tangency_budget;
                let ratio = trial.err_ratio.max(budget_ratio);
                let accept = is_finite_scalar(ratio) && ratio <= T::one();

                if !accept {
                    let r = if is_finite_scalar(ratio) { ratio } else { lit(1e12) };
                    dt_base = next_dt(step_dt, r, cfg.dt_max, true);
                    rejected_last = true;
                    continue;
                }

                y = trial.y_new;
                t = if landing {
                    cfg.record_at[record_idx]
                } else if hit_tmax {
                    cfg.t_max
                } else {
                    t + step_dt
                };
                steps += 1;
                let deriv_sup = vec_sup(&trial.k_new);
                max_tangency = max_tangency.max(space.repair(&mut y));
                if y.iter().any(|x| !is_finite_scalar(*x)) {
                    return Err(DynamicsError::NonFiniteState { t: to_f64(t) });
                }

                if landing {
                    record_idx += 1;
                    recorder.record_forced(space.sample(t, &y));
                    // Do not let a short landing step shrink the working dt.
                } else {
                    recorder.record_regular(space.sample(t, &y));
                    dt_base = next_dt(step_dt, trial.err_ratio, cfg.dt_max, rejected_last);
                }
                rejected_last = false;
                k1 = rhs(t, &y);

                let (s, q, c1) = space.observe(&y);
                if s < cfg.s_floor {
                    recorder.record_forced(space.sample(t, &y));
                    return Ok(finish(recorder, RunEnd::ConvergedToZero, steps, max_tangency, depth));
                }
                if let Some(end) = stop_hit(&cfg.stops, deriv_sup, s, q, c1) {
                    recorder.record_forced(space.sample(t, &y));
                    return Ok(finish(recorder, end, steps, max_tangency, depth));
                }
            }
        }
    }
}

fn finish<T: Scalar>(
    recorder: Recorder<T>,
    end: RunEnd,
    steps: usize,
    max_tangency: T,
    depth: usize,
) -> Trajectory<T> {
    Trajectory {
        samples: recorder.finish(),
        meta: TrajectoryMeta { end, steps, max_tangency, depth },
    }
}

/// Integrates the reduced flow from `state0`, starting at `state0.t`.
pub fn integrate_coords<T: Scalar>(
    target: &TargetSpec<T>,
    state0: &CoordState<T>,
    depth: usize,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>, DynamicsError> {
    if state0.a.len() != target.d_y() || state0.b.len() != target.d_x() {
        return Err(DynamicsError::Model(crate::model::ModelError::ShapeMismatch {
            context: "initial coordinates do not match the target".into(),
        }));
    }
    if state0.s <= T::zero() {
        return Err(DynamicsError::NonPositiveS { s: to_f64(state0.s) });
    }
    // A start off the unit spheres would trip the per-step drift budget on
    // every trial and collapse the step size; reject it up front instead.
    for norm in [state0.a.norm(), state0.b.norm()] {
        let defect = (norm * norm - T::one()).abs();
        if defect > cfg.tangency_budget {
            return Err(DynamicsError::Model(crate::model::ModelError::NotUnit {
                norm: to_f64(norm),
            }));
        }
    }
    let d_y = target.d_y();
    let d_x = target.d_x();
    let mut y0 = DVector::zeros(1 + d_y + d_x);
    y0[0] = state0.s;
    for i in 0..d_y {
        y0[1 + i] = state0.a[i];
    }
    for i in 0..d_x {
        y0[1 + d_y + i] = state0.b[i];
    }

    let space = CoordSpace { target, d_y, d_x };
    // Stage states may dip to non-positive s transiently; the total RHS
    // variant lets the error controller reject those steps instead of
    // aborting the run.
    let rhs = |_t: T, y: &DVector<T>| {
        let st = space.unpack(y);
        let d = rhs_coords_raw(target, &st, depth);
        let mut out = DVector::zeros(1 + d_y + d_x);
        out[0] = d.ds;
        for i in 0..d_y {
            out[1 + i] = d.da[i];
        }
        for i in 0..d_x {
            out[1 + d_y + i] = d.db[i];
        }
        out
    };
    run_loop(&space, rhs, y0, state0.t, depth, cfg)
}

/// Integrates the induced-weight flow from the matrix `w0`.
pub fn integrate_induced<T: Scalar>(
    target: &TargetSpec<T>,
    w0: &DMatrix<T>,
    depth: usize,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>, DynamicsError> {
    if w0.nrows() != target.d_y() || w0.ncols() != target.d_x() {
        return Err(DynamicsError::Model(crate::model::ModelError::ShapeMismatch {
            context: "initial weight does not match the target".into(),
        }));
    }
    let space = InducedSpace { target, d_y: target.d_y(), d_x: target.d_x() };
    let y0 = DVector::from_column_slice(w0.as_slice());
    // Stage states leave the rank-one manifold at truncation order, and the
    // raw Gram-power extension is only Holder continuous transverse to it,
    // which both wrecks the error estimate and amplifies eigenvalue noise.
    // Evaluating through the leading singular triple instead keeps the
    // right-hand side smooth near the manifold and exactly equal to the flow
    // on it; accepted states are truncated back to rank one by `repair`.
    let rhs = |_t: T, y: &DVector<T>| {
        let w = space.unpack(y);
        let (s, u, v, _) = space.extract(&w);
        let dw = induced_rhs_rank_one(target, s, &u, &v, depth);
        DVector::from_column_slice(dw.as_slice())
    };
    run_loop(&space, rhs, y0, T::zero(), depth, cfg)
}
