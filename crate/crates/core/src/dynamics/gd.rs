//! Gradient descent on explicit layer stacks.
//!
//! The loss being descended is `1/2 ||W_N ... W_1 - Z||_F^2`, whose gradient
//! with respect to layer `i` is
//!
//! ```text
//! G_i = (W_N ... W_{i+1})^T (W - Z) (W_{i-1} ... W_1)^T
//! ```
//!
//! With step size `lr`, step `k` corresponds to flow time `t = k * lr`.
//! Recorded samples report the unscaled loss `||W - Z||_F^2` like the flow
//! integrators do.

use nalgebra::DMatrix;

use crate::model::{
    balancedness_residual, induced_weight, loss_from_matrix, max_abs, observables, CoordState,
    LayerStack, RunEnd, Sample, TargetSpec, Trajectory, TrajectoryMeta,
};
use crate::scalar::{lit, lit_usize, to_f64, Scalar};

use super::DynamicsError;

#[derive(Debug, Clone)]
pub struct GdConfig<T: Scalar> {
    pub lr: T,
    pub steps: usize,
    /// Record every this many steps (step 0 and the last step always).
    pub record_every: usize,
    /// Stop early once the sup norm over all layer gradients drops this low.
    pub grad_stop: Option<T>,
    /// Abort when the induced weight's Frobenius norm exceeds
    /// `divergence_factor * max(s1, s(0))`.
    pub divergence_factor: T,
    /// Warn (once) when the initial stack is unbalanced beyond this.
    pub bal_warn: T,
}

impl<T: Scalar> Default for GdConfig<T> {
    fn default() -> Self {
        Self {
            lr: lit(1e-4),
            steps: 10_000,
            record_every: 10,
            grad_stop: None,
            divergence_factor: lit(10.0),
            bal_warn: lit(1e-6),
        }
    }
}

/// Gradients of `1/2 ||W_N ... W_1 - Z||_F^2` for every layer.
pub fn layer_gradients<T: Scalar>(
    target: &TargetSpec<T>,
    stack: &LayerStack<T>,
) -> Vec<DMatrix<T>> {
    let n = stack.depth();
    let layers = stack.layers();
    // prefix[i] = W_i ... W_1 (prefix[0] = I), suffix[i] = W_N ... W_{i+1}.
    let mut prefix: Vec<DMatrix<T>> = Vec::with_capacity(n + 1);
    prefix.push(DMatrix::identity(layers[0].ncols(), layers[0].ncols()));
    for l in layers {
        let next = l * prefix.last().expect("non-empty");
        prefix.push(next);
    }
    let d_y = layers[n - 1].nrows();
    let mut suffix: Vec<DMatrix<T>> = vec![DMatrix::identity(d_y, d_y); n + 1];
    for i in (0..n).rev() {
        suffix[i] = &suffix[i + 1] * &layers[i];
    }
    let r = prefix[n].clone() - target.z();
    (0..n)
        .map(|i| suffix[i + 1].transpose() * &r * prefix[i].transpose())
        .collect()
}

fn gd_sample<T: Scalar>(target: &TargetSpec<T>, stack: &LayerStack<T>, t: T) -> Sample<T> {
    let w = induced_weight(stack);
    let svd = w.clone().svd(true, true);
    let u_m = svd.u.expect("svd with vectors");
    let v_t = svd.v_t.expect("svd with vectors");
    let mut top = 0;
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > svd.singular_values[top] {
            top = i;
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
    let a = target.u().transpose() * &u;
    let b = target.v().transpose() * &v;
    let st = CoordState::new(s, a.clone(), b.clone());
    let (q, q1) = observables(target, &st);
    Sample {
        t,
        s,
        q,
        q1,
        loss: loss_from_matrix(target, &w, T::zero()),
        bal_residual: balancedness_residual(stack),
        a,
        b,
    }
}

/// Runs gradient descent, returning the recorded trajectory and the final
/// stack.
pub fn gd_run<T: Scalar>(
    target: &TargetSpec<T>,
    stack0: &LayerStack<T>,
    cfg: &GdConfig<T>,
) -> Result<(Trajectory<T>, LayerStack<T>), DynamicsError> {
    let layers = stack0.layers();
    let (d_y, d_x) = (layers[layers.len() - 1].nrows(), layers[0].ncols());
    if d_y != target.d_y() || d_x != target.d_x() {
        return Err(DynamicsError::Model(crate::model::ModelError::ShapeMismatch {
            context: "stack does not match the target".into(),
        }));
    }
    let bal0 = balancedness_residual(stack0);
    if bal0 > cfg.bal_warn {
        log::warn!(
            "initial stack is unbalanced (residual {:e}); reduced-flow comparisons may drift",
            to_f64(bal0)
        );
    }

    let mut stack = stack0.clone();
    let w0 = induced_weight(&stack);
    let s0_frob = w0.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt();
    let limit = cfg.divergence_factor * target.s1().max(s0_frob);
    let record_every = cfg.record_every.max(1);

    let mut samples = vec![gd_sample(target, &stack, T::zero())];
    let mut end = RunEnd::StepsExhausted;
    let mut steps_taken = 0usize;

    for step in 1..=cfg.steps {
        let grads = layer_gradients(target, &stack);
        if let Some(eps) = cfg.grad_stop {
            let sup = grads.iter().fold(T::zero(), |acc, g| acc.max(max_abs(g)));
            if sup <= eps {
                end = RunEnd::Converged;
                break;
            }
        }
        for (l, g) in stack.layers_mut().iter_mut().zip(&grads) {
            l.zip_apply(g, |w, gw| *w -= cfg.lr * gw);
        }
        steps_taken = step;

        let w = induced_weight(&stack);
        let frob = w.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt();
        if !to_f64(frob).is_finite() || frob > limit {
            return Err(DynamicsError::DivergenceDetected {
                s: to_f64(frob),
                limit: to_f64(limit),
            });
        }

        if step % record_every == 0 || step == cfg.steps {
            samples.push(gd_sample(target, &stack, lit_usize::<T>(step) * cfg.lr));
        }
    }
    if end == RunEnd::Converged {
        let t = lit_usize::<T>(steps_taken) * cfg.lr;
        if samples.last().map(|s| to_f64(s.t)) != Some(to_f64(t)) {
            samples.push(gd_sample(target, &stack, t));
        }
    }

    let meta = TrajectoryMeta {
        end,
        steps: steps_taken,
        max_tangency: T::zero(),
        depth: stack.depth(),
    };
    Ok((Trajectory { samples, meta }, stack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate::{integrate_coords, IntegratorConfig};
    use crate::model::{coords_from_uv, target_from_factors, Tolerances};
    use crate::rng::{random_orthogonal, random_unit_vector, seeded};
    use nalgebra::{DMatrix, DVector};

    fn random_target(rng: &mut crate::rng::SeededRng, d_y: usize, d_x: usize) -> TargetSpec<f64> {
        let u = random_orthogonal(rng, d_y);
        let v = random_orthogonal(rng, d_x);
        let sv = DVector::from_row_slice(&[2.0, 1.1]);
        target_from_factors(u, sv, v, &Tolerances::default()).unwrap()
    }

    fn random_stack(rng: &mut crate::rng::SeededRng, widths: &[usize]) -> LayerStack<f64> {
        let layers: Vec<DMatrix<f64>> = (0..widths.len() - 1)
            .map(|i| {
                DMatrix::from_fn(widths[i + 1], widths[i], |_, _| {
                    0.3 * crate::rng::standard_normal(rng)
                })
            })
            .collect();
        LayerStack::new(layers).unwrap()
    }

    #[test]
    fn layer_gradients_match_central_differences() {
        let mut rng = seeded(31, "gd-fd");
        let target = random_target(&mut rng, 3, 4);
        let stack = random_stack(&mut rng, &[4, 2, 1, 3]);
        let grads = layer_gradients(&target, &stack);
        let h = 1e-5;
        let loss_half = |st: &LayerStack<f64>| {
            0.5 * loss_from_matrix(&target, &induced_weight(st), 0.0)
        };
        for li in 0..stack.depth() {
            let (rows, cols) = grads[li].shape();
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = stack.clone();
                    plus.layers_mut()[li][(i, j)] += h;
                    let mut minus = stack.clone();
                    minus.layers_mut()[li][(i, j)] -= h;
                    let fd = (loss_half(&plus) - loss_half(&minus)) / (2.0 * h);
                    assert!(
                        (grads[li][(i, j)] - fd).abs() < 1e-7,
                        "layer {li} entry ({i},{j}): {} vs {fd}",
                        grads[li][(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn single_layer_gradient_is_the_residual() {
        let mut rng = seeded(35, "gd-single");
        let target = random_target(&mut rng, 3, 4);
        let w = DMatrix::from_fn(3, 4, |_, _| crate::rng::standard_normal(&mut rng));
        let stack = LayerStack::new(vec![w.clone()]).unwrap();
        let grads = layer_gradients(&target, &stack);
        assert_eq!(grads.len(), 1);
        assert!(max_abs(&(grads[0].clone() - (w - target.z()))) < 1e-14);
    }

    #[test]
    fn stack_at_the_rank_one_optimum_is_stationary() {
        let mut rng = seeded(36, "gd-stationary");
        let target = random_target(&mut rng, 3, 3);
        // Telescoping h-chain realizing W = s1 u1 v1^T exactly.
        let s1 = target.s1();
        let widths = [3usize, 2, 1, 3];
        let n = widths.len() - 1;
        let c = s1.powf(1.0 / n as f64);
        let mut hs: Vec<DVector<f64>> = vec![target.v_col(0)];
        for w in &widths[1..n] {
            hs.push(random_unit_vector(&mut rng, *w));
        }
        hs.push(target.u_col(0));
        let layers: Vec<DMatrix<f64>> =
            (0..n).map(|i| &hs[i + 1] * hs[i].transpose() * c).collect();
        let stack = LayerStack::new(layers).unwrap();

        let (traj, _) = gd_run(
            &target,
            &stack,
            &GdConfig { lr: 1e-3, steps: 1000, record_every: 100, ..GdConfig::default() },
        )
        .unwrap();
        let first = traj.first();
        for s in &traj.samples {
            assert!((s.loss - first.loss).abs() < 1e-10, "loss moved at t = {}", s.t);
            assert!((s.s - s1).abs() < 1e-10, "scale moved at t = {}", s.t);
        }
    }

    #[test]
    fn descent_from_balanced_stack_tracks_the_reduced_flow() {
        let mut rng = seeded(32, "gd-vs-flow");
        let target = random_target(&mut rng, 3, 3);
        // Balanced rank-one stack: W_i = s0^(1/N) h_{i+1} h_i^T.
        let widths = [3usize, 2, 1, 3];
        let s0: f64 = 0.5;
        let hs: Vec<DVector<f64>> = widths
            .iter()
            .map(|w| random_unit_vector(&mut rng, *w))
            .collect();
        let n = widths.len() - 1;
        let c = s0.powf(1.0 / n as f64);
        let layers: Vec<DMatrix<f64>> =
            (0..n).map(|i| &hs[i + 1] * hs[i].transpose() * c).collect();
        let stack = LayerStack::new(layers).unwrap();
        assert!(balancedness_residual(&stack) < 1e-12);

        let lr = 5e-5;
        let steps = 20_000; // t = 1.0
        let (gd_traj, _) = gd_run(
            &target,
            &stack,
            &GdConfig { lr, steps, record_every: steps, ..GdConfig::default() },
        )
        .unwrap();

        let st0 = coords_from_uv(&target, s0, &hs[n], &hs[0], &Tolerances::default()).unwrap();
        let flow = integrate_coords(
            &target,
            &st0,
            n,
            &IntegratorConfig {
                t_max: 1.0,
                rtol: 1e-10,
                atol: 1e-12,
                ..IntegratorConfig::default()
            },
        )
        .unwrap();

        let gd_last = gd_traj.last();
        let flow_last = flow.last();
        assert!((gd_last.t - 1.0).abs() < 1e-12);
        assert!(
            (gd_last.s - flow_last.s).abs() < 2e-3,
            "{} vs {}",
            gd_last.s,
            flow_last.s
        );
        assert!((gd_last.q - flow_last.q).abs() < 2e-3);
        // Discrete steps break exact balance at O(lr^2) each; the residual
        // accumulates to about steps * lr^2 times a gradient-scale factor.
        let bal_scale = steps as f64 * lr * lr;
        assert!(
            gd_last.bal_residual < 10.0 * bal_scale,
            "descent keeps near-balance: {} vs {bal_scale}",
            gd_last.bal_residual
        );
    }

    #[test]
    fn divergence_guard_trips_on_oversized_steps() {
        let mut rng = seeded(33, "gd-diverge");
        let target = random_target(&mut rng, 3, 3);
        let stack = random_stack(&mut rng, &[3, 1, 3]);
        let err = gd_run(
            &target,
            &stack,
            &GdConfig { lr: 10.0, steps: 500, ..GdConfig::default() },
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::DivergenceDetected { .. }), "{err}");
    }

    #[test]
    fn gradient_stop_ends_early_near_the_optimum() {
        let mut rng = seeded(34, "gd-stop");
        let target = random_target(&mut rng, 2, 2);
        // Start close to the rank-one optimum, well inside the basin.
        let u1 = target.u_col(0);
        let v1 = target.v_col(0);
        let s = target.s1() * 0.9;
        let layers = vec![
            DMatrix::from_fn(1, 2, |_, j| v1[j] * s.sqrt()),
            DMatrix::from_fn(2, 1, |i, _| u1[i] * s.sqrt()),
        ];
        let stack = LayerStack::new(layers).unwrap();
        let (traj, _) = gd_run(
            &target,
            &stack,
            &GdConfig {
                lr: 1e-2,
                steps: 2_000_000,
                record_every: 1000,
                grad_stop: Some(1e-10),
                ..GdConfig::default()
            },
        )
        .unwrap();
        assert_eq!(traj.meta.end, RunEnd::Converged);
        assert!((traj.last().s - target.s1()).abs() < 1e-6);
        assert!((traj.last().q1 - target.s1()).abs() < 1e-6);
    }
}
