//! Problem data and state types: targets, networks, layer stacks, rank-one
//! weights, singular-basis coordinates, and recorded trajectories.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, to_f64, Scalar};

/// Validation tolerances. All checks in this module take them explicitly;
/// [`Tolerances::default`] matches the documented interface contracts.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances<T: Scalar> {
    /// Orthogonality residual allowed on singular-vector factors.
    pub orth_tol: T,
    /// Reconstruction residual allowed on factorizations.
    pub recon_tol: T,
    /// Allowed deviation of direction-vector norms from one.
    pub unit_tol: T,
    /// Minimal relative gap `(sv[i] - sv[i+1]) / sv[0]` between singular values.
    pub gap_tol: T,
    /// Allowed balancedness residual before a stack draws a warning.
    pub bal_tol: T,
    /// Allowed ratio of second to first singular value in rank-one extraction.
    pub rank_tol: T,
    /// Scales below this count as zero.
    pub s_zero_tol: T,
    /// Allowed residual of `X X^T - I` for whitened data.
    pub whiten_tol: T,
}

impl<T: Scalar> Default for Tolerances<T> {
    fn default() -> Self {
        Self {
            orth_tol: lit(1e-10),
            recon_tol: lit(1e-10),
            unit_tol: lit(1e-9),
            gap_tol: lit(1e-6),
            bal_tol: lit(1e-6),
            rank_tol: lit(1e-8),
            s_zero_tol: lit(1e-12),
            whiten_tol: lit(1e-10),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("NonDecreasingSingularValues: singular values must be strictly positive and strictly decreasing")]
    NonDecreasingSingularValues,
    #[error("GapTooSmall: relative gap {gap:e} after singular value {index} is below {tol:e}")]
    GapTooSmall { index: usize, gap: f64, tol: f64 },
    #[error("NotOrthogonal: factor {side} has orthogonality residual {residual:e}")]
    NotOrthogonal { side: char, residual: f64 },
    #[error("NotWhitened: ||X X^T - I||_max = {residual:e} exceeds tolerance")]
    NotWhitened { residual: f64 },
    #[error("ShapeMismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("NotRankOne: relative second singular value {ratio:e} exceeds tolerance")]
    NotRankOne { ratio: f64 },
    #[error("NotUnit: direction vector has norm {norm} (must be 1 within tolerance)")]
    NotUnit { norm: f64 },
    #[error("ZeroTarget: data produce a zero target matrix")]
    ZeroTarget,
}

fn shape_mismatch<S: Into<String>>(context: S) -> ModelError {
    ModelError::ShapeMismatch { context: context.into() }
}

/// Largest absolute entry of a matrix (zero for empty matrices).
pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Target
// ---------------------------------------------------------------------------

/// Immutable target matrix `Z` in factored form `Z = U diag(sv) V^T`, with
/// full orthogonal bases `U` (d_y x d_y) and `V` (d_x x d_x), and strictly
/// decreasing, strictly positive singular values `sv` of length `d`.
#[derive(Debug, Clone)]
pub struct TargetSpec<T: Scalar> {
    d_y: usize,
    d_x: usize,
    sv: DVector<T>,
    u: DMatrix<T>,
    v: DMatrix<T>,
    z: DMatrix<T>,
    z1: DMatrix<T>,
}

impl<T: Scalar> TargetSpec<T> {
    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    /// Rank of the target.
    pub fn d(&self) -> usize {
        self.sv.len()
    }

    pub fn sv(&self) -> &DVector<T> {
        &self.sv
    }

    /// `sv[i]` for `i < d`, zero beyond the rank (0-based index).
    pub fn sv_or_zero(&self, i: usize) -> T {
        if i < self.sv.len() {
            self.sv[i]
        } else {
            T::zero()
        }
    }

    pub fn s1(&self) -> T {
        self.sv[0]
    }

    /// Second singular value, zero when the target has rank one.
    pub fn s2(&self) -> T {
        self.sv_or_zero(1)
    }

    pub fn u(&self) -> &DMatrix<T> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<T> {
        &self.v
    }

    pub fn u_col(&self, i: usize) -> DVector<T> {
        self.u.column(i).into_owned()
    }

    pub fn v_col(&self, i: usize) -> DVector<T> {
        self.v.column(i).into_owned()
    }

    /// The target matrix `Z`.
    pub fn z(&self) -> &DMatrix<T> {
        &self.z
    }

    /// Best rank-one approximation `Z_1 = sv[0] u_1 v_1^T`.
    pub fn z1(&self) -> &DMatrix<T> {
        &self.z1
    }

    /// Squared Frobenius norm of `Z` (sum of squared singular values).
    pub fn z_norm_sq(&self) -> T {
        self.sv.iter().fold(T::zero(), |acc, s| acc + *s * *s)
    }
}

fn validate_sv<T: Scalar>(sv: &DVector<T>, tol: &Tolerances<T>) -> Result<(), ModelError> {
    if sv.is_empty() || sv[sv.len() - 1] <= T::zero() {
        return Err(ModelError::NonDecreasingSingularValues);
    }
    for i in 0..sv.len() - 1 {
        if sv[i] < sv[i + 1] {
            return Err(ModelError::NonDecreasingSingularValues);
        }
        let gap = (sv[i] - sv[i + 1]) / sv[0];
        if gap < tol.gap_tol {
            return Err(ModelError::GapTooSmall {
                index: i,
                gap: to_f64(gap),
                tol: to_f64(tol.gap_tol),
            });
        }
    }
    Ok(())
}

fn orthogonality_residual<T: Scalar>(m: &DMatrix<T>) -> T {
    let n = m.ncols();
    let gram = m.transpose() * m;
    let mut res = T::zero();
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { T::one() } else { T::zero() };
            res = res.max((gram[(i, j)] - expect).abs());
        }
    }
    res
}

/// Builds a target from explicit factors. `u` and `v` must be square
/// orthogonal, `sv` strictly decreasing and positive with `len(sv) <=
/// min(d_y, d_x)`.
pub fn target_from_factors<T: Scalar>(
    u: DMatrix<T>,
    sv: DVector<T>,
    v: DMatrix<T>,
    tol: &Tolerances<T>,
) -> Result<TargetSpec<T>, ModelError> {
    let d_y = u.nrows();
    let d_x = v.nrows();
    if !u.is_square() || !v.is_square() {
        return Err(shape_mismatch("singular vector factors must be square"));
    }
    if sv.len() > d_y.min(d_x) {
        return Err(shape_mismatch(format!(
            "rank {} exceeds min(d_y, d_x) = {}",
            sv.len(),
            d_y.min(d_x)
        )));
    }
    validate_sv(&sv, tol)?;
    let res_u = orthogonality_residual(&u);
    if res_u > tol.orth_tol {
        return Err(ModelError::NotOrthogonal { side: 'U', residual: to_f64(res_u) });
    }
    let res_v = orthogonality_residual(&v);
    if res_v > tol.orth_tol {
        return Err(ModelError::NotOrthogonal { side: 'V', residual: to_f64(res_v) });
    }

    let d = sv.len();
    let mut z = DMatrix::zeros(d_y, d_x);
    for j in 0..d {
        z += u.column(j) * v.column(j).transpose() * sv[j];
    }
    let z1 = u.column(0) * v.column(0).transpose() * sv[0];
    Ok(TargetSpec { d_y, d_x, sv, u, v, z, z1 })
}

/// Singular triples of a matrix, sorted by decreasing singular value.
fn sorted_svd<T: Scalar>(m: &DMatrix<T>) -> (Vec<T>, Vec<DVector<T>>, Vec<DVector<T>>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd with vectors");
    let v_t = svd.v_t.expect("svd with vectors");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("singular values are ordered")
    });
    let sigmas = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let us = idx.iter().map(|&i| u.column(i).into_owned()).collect();
    let vs = idx.iter().map(|&i| v_t.row(i).transpose()).collect();
    (sigmas, us, vs)
}

/// Extends a set of orthonormal columns to a full orthonormal basis by
/// orthogonalizing the best-conditioned coordinate axes (deterministic).
fn complete_orthonormal<T: Scalar>(cols: Vec<DVector<T>>, dim: usize) -> DMatrix<T> {
    let mut basis = cols;
    while basis.len() < dim {
        let mut best: Option<(T, DVector<T>)> = None;
        for j in 0..dim {
            let mut cand = DVector::zeros(dim);
            cand[j] = T::one();
            for b in &basis {
                let proj = b.dot(&cand);
                cand -= b * proj;
            }
            let n = cand.norm();
            if best.as_ref().map_or(true, |(bn, _)| n > *bn) {
                best = Some((n, cand));
            }
        }
        let (n, cand) = best.expect("dim > 0");
        let mut next = cand / n;
        // Second orthogonalization pass for numerical cleanliness.
        for b in &basis {
            let proj = b.dot(&next);
            next -= b * proj;
        }
        let n2 = next.norm();
        basis.push(next / n2);
    }
    DMatrix::from_columns(&basis)
}

/// Builds a target from a data pair: `Y` (d_y x m), `X` (d_x x m) with
/// whitened inputs `X X^T = I`. The target is `Z = Y X^T`, factored by SVD
/// and completed to full orthogonal bases.
pub fn target_from_data<T: Scalar>(
    y: &DMatrix<T>,
    x: &DMatrix<T>,
    tol: &Tolerances<T>,
) -> Result<TargetSpec<T>, ModelError> {
    if y.ncols() != x.ncols() {
        return Err(shape_mismatch("Y and X must share the sample dimension"));
    }
    let d_x = x.nrows();
    let gram = x * x.transpose();
    let mut res = T::zero();
    for i in 0..d_x {
        for j in 0..d_x {
            let expect = if i == j { T::one() } else { T::zero() };
            res = res.max((gram[(i, j)] - expect).abs());
        }
    }
    if res > tol.whiten_tol {
        return Err(ModelError::NotWhitened { residual: to_f64(res) });
    }

    let z = y * x.transpose();
    let d_y = z.nrows();
    let (sigmas, us, vs) = sorted_svd(&z);
    if sigmas.is_empty() || sigmas[0] <= tol.s_zero_tol {
        return Err(ModelError::ZeroTarget);
    }
    let eps = lit::<T>(f64::EPSILON);
    let cutoff = sigmas[0] * eps * crate::scalar::lit_usize::<T>(d_y.max(d_x) * 16);
    let d = sigmas.iter().take_while(|s| **s > cutoff).count();
    let sv = DVector::from_vec(sigmas[..d].to_vec());
    validate_sv(&sv, tol)?;
    let u_full = complete_orthonormal(us[..d].to_vec(), d_y);
    let v_full = complete_orthonormal(vs[..d].to_vec(), d_x);
    target_from_factors(u_full, sv, v_full, tol)
}

// ---------------------------------------------------------------------------
// Networks and layer stacks
// ---------------------------------------------------------------------------

/// Architecture: widths `d_0, ..., d_N` from input to output. The narrowest
/// layer must have width exactly one; that is what forces `rank(W) <= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    widths: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, ModelError> {
        if widths.len() < 3 {
            return Err(shape_mismatch("network needs depth >= 2 (at least 3 widths)"));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(shape_mismatch("all widths must be positive"));
        }
        if *widths.iter().min().expect("non-empty") != 1 {
            return Err(shape_mismatch("the narrowest layer must have width 1"));
        }
        Ok(Self { widths })
    }

    /// Number of layers `N`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Widths `d_0..d_N`, input first.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn matches_target<T: Scalar>(&self, target: &TargetSpec<T>) -> Result<(), ModelError> {
        if self.input_dim() != target.d_x() || self.output_dim() != target.d_y() {
            return Err(shape_mismatch(format!(
                "network ({} -> {}) does not match target ({} -> {})",
                self.input_dim(),
                self.output_dim(),
                target.d_x(),
                target.d_y()
            )));
        }
        Ok(())
    }
}

/// Layer matrices `W_1, ..., W_N`, stored input-side first: `layers[i-1]`
/// is `W_i` with shape `d_i x d_{i-1}`.
#[derive(Debug, Clone)]
pub struct LayerStack<T: Scalar> {
    layers: Vec<DMatrix<T>>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn new(layers: Vec<DMatrix<T>>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(shape_mismatch("a stack needs at least one layer"));
        }
        for i in 0..layers.len() - 1 {
            if layers[i + 1].ncols() != layers[i].nrows() {
                return Err(shape_mismatch(format!(
                    "layer {} output dim {} does not feed layer {} input dim {}",
                    i + 1,
                    layers[i].nrows(),
                    i + 2,
                    layers[i + 1].ncols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DMatrix<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DMatrix<T>] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Widths `d_0..d_N` implied by the layer shapes.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers.len() + 1);
        w.push(self.layers[0].ncols());
        for l in &self.layers {
            w.push(l.nrows());
        }
        w
    }
}

/// End-to-end product `W = W_N ... W_1` (shape d_y x d_x).
pub fn induced_weight<T: Scalar>(stack: &LayerStack<T>) -> DMatrix<T> {
    let mut acc = stack.layers[0].clone();
    for l in &stack.layers[1..] {
        acc = l * acc;
    }
    acc
}

/// Largest entry of any `W_i W_i^T - W_{i+1}^T W_{i+1}` across adjacent
/// layers. Zero exactly when the stack is balanced.
pub fn balancedness_residual<T: Scalar>(stack: &LayerStack<T>) -> T {
    let mut res = T::zero();
    for i in 0..stack.layers.len() - 1 {
        let left = &stack.layers[i] * stack.layers[i].transpose();
        let right = stack.layers[i + 1].transpose() * &stack.layers[i + 1];
        res = res.max(max_abs(&(left - right)));
    }
    res
}

// ---------------------------------------------------------------------------
// Rank-one weights and coordinates
// ---------------------------------------------------------------------------

/// Rank-one decomposition `W = s u v^T` with `s >= 0`. For `s = 0` the
/// directions are undefined and absent.
#[derive(Debug, Clone)]
pub struct RankOne<T: Scalar> {
    pub s: T,
    /// `(u, v)`, present when `s > 0`. Sign convention: the largest-magnitude
    /// entry of `u` is positive (first such entry on ties).
    pub dirs: Option<(DVector<T>, DVector<T>)>,
}

/// Extracts the rank-one decomposition of `w`, failing with [`ModelError::NotRankOne`]
/// when the second singular value exceeds `rank_tol` relative to the first.
pub fn rank_one_svd<T: Scalar>(
    w: &DMatrix<T>,
    tol: &Tolerances<T>,
) -> Result<RankOne<T>, ModelError> {
    let (sigmas, us, vs) = sorted_svd(w);
    let s = sigmas[0];
    if s <= tol.s_zero_tol {
        return Ok(RankOne { s: T::zero(), dirs: None });
    }
    if sigmas.len() > 1 {
        let ratio = sigmas[1] / s;
        if ratio > tol.rank_tol {
            return Err(ModelError::NotRankOne { ratio: to_f64(ratio) });
        }
    }
    let mut u = us[0].clone();
    let mut v = vs[0].clone();
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
    Ok(RankOne { s, dirs: Some((u, v)) })
}

/// State of the reduced flow: time `t`, scale `s >= 0`, and the coefficients
/// of the current directions in the target's singular bases, `a = U^T u`
/// (length d_y) and `b = V^T v` (length d_x). Both coefficient vectors are
/// unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordState<T: Scalar> {
    pub t: T,
    pub s: T,
    pub a: DVector<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> CoordState<T> {
    pub fn new(s: T, a: DVector<T>, b: DVector<T>) -> Self {
        Self { t: T::zero(), s, a, b }
    }

    pub fn with_time(mut self, t: T) -> Self {
        self.t = t;
        self
    }

    pub fn validate(
        &self,
        target: &TargetSpec<T>,
        tol: &Tolerances<T>,
    ) -> Result<(), ModelError> {
        if self.a.len() != target.d_y() || self.b.len() != target.d_x() {
            return Err(shape_mismatch(format!(
                "coordinate lengths ({}, {}) do not match target ({}, {})",
                self.a.len(),
                self.b.len(),
                target.d_y(),
                target.d_x()
            )));
        }
        let na = self.a.norm();
        if (na - T::one()).abs() > tol.unit_tol {
            return Err(ModelError::NotUnit { norm: to_f64(na) });
        }
        let nb = self.b.norm();
        if (nb - T::one()).abs() > tol.unit_tol {
            return Err(ModelError::NotUnit { norm: to_f64(nb) });
        }
        Ok(())
    }

    /// First alignment indicator pair product `a_1 b_1`.
    pub fn c1(&self) -> T {
        self.a[0] * self.b[0]
    }
}

/// Converts direction vectors into singular-basis coordinates.
pub fn coords_from_uv<T: Scalar>(
    target: &TargetSpec<T>,
    s: T,
    u: &DVector<T>,
    v: &DVector<T>,
    tol: &Tolerances<T>,
) -> Result<CoordState<T>, ModelError> {
    if u.len() != target.d_y() || v.len() != target.d_x() {
        return Err(shape_mismatch("direction lengths do not match target"));
    }
    let nu = u.norm();
    if (nu - T::one()).abs() > tol.unit_tol {
        return Err(ModelError::NotUnit { norm: to_f64(nu) });
    }
    let nv = v.norm();
    if (nv - T::one()).abs() > tol.unit_tol {
        return Err(ModelError::NotUnit { norm: to_f64(nv) });
    }
    let a = target.u().transpose() * u;
    let b = target.v().transpose() * v;
    Ok(CoordState::new(s, a, b))
}

/// Alignment observables `(q, q1)`: `q = u^T Z v = sum_j sv_j a_j b_j` and
/// `q1 = u^T Z_1 v = sv_1 a_1 b_1`.
pub fn observables<T: Scalar>(target: &TargetSpec<T>, state: &CoordState<T>) -> (T, T) {
    let d = target.d();
    let mut q = T::zero();
    for j in 0..d {
        q += target.sv()[j] * state.a[j] * state.b[j];
    }
    let q1 = target.s1() * state.a[0] * state.b[0];
    (q, q1)
}

/// Squared-distance loss `||W - Z||_F^2 + const_term`.
pub fn loss_from_matrix<T: Scalar>(target: &TargetSpec<T>, w: &DMatrix<T>, const_term: T) -> T {
    let diff = w - target.z();
    diff.iter().fold(T::zero(), |acc, x| acc + *x * *x) + const_term
}

/// Same loss evaluated in coordinates: `s^2 - 2 s q + ||Z||_F^2` for unit
/// `a`, `b`.
pub fn loss_from_coords<T: Scalar>(target: &TargetSpec<T>, state: &CoordState<T>) -> T {
    let (q, _) = observables(target, state);
    state.s * state.s - lit::<T>(2.0) * state.s * q + target.z_norm_sq()
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunEnd {
    /// Time horizon reached.
    TMaxReached,
    /// Scale dropped below the configured threshold.
    SBelow,
    /// Derivative sup-norm dropped below the configured threshold.
    Converged,
    /// A requested stage boundary was crossed.
    StageReached,
    /// Scale reached the numerical zero floor.
    ConvergedToZero,
    /// Gradient descent exhausted its step budget.
    StepsExhausted,
    /// Loaded from an external file; the producer's stop reason is unknown.
    External,
}

/// One recorded point along a run.
#[derive(Debug, Clone)]
pub struct Sample<T: Scalar> {
    pub t: T,
    pub s: T,
    pub q: T,
    pub q1: T,
    pub loss: T,
    pub bal_residual: T,
    pub a: DVector<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> Sample<T> {
    /// First alignment indicator pair product `a_1 b_1`.
    pub fn c1(&self) -> T {
        self.a[0] * self.b[0]
    }

    pub fn state(&self) -> CoordState<T> {
        CoordState::new(self.s, self.a.clone(), self.b.clone()).with_time(self.t)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryMeta<T: Scalar> {
    pub end: RunEnd,
    /// Accepted integrator steps or gradient steps taken.
    pub steps: usize,
    /// Largest `|a . da|` or `|b . db|` seen before renormalization.
    pub max_tangency: T,
    /// Depth of the network that produced the run (0 when unknown).
    pub depth: usize,
}

/// A recorded run: samples ordered by time plus bookkeeping.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub samples: Vec<Sample<T>>,
    pub meta: TrajectoryMeta<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn first(&self) -> &Sample<T> {
        self.samples.first().expect("trajectory has samples")
    }

    pub fn last(&self) -> &Sample<T> {
        self.samples.last().expect("trajectory has samples")
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// JSON form of the target
// ---------------------------------------------------------------------------

/// Serializable form of [`TargetSpec`]: matrices row-major as nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpecJson {
    pub d_y: usize,
    pub d_x: usize,
    pub sv: Vec<f64>,
    #[serde(rename = "U")]
    pub u: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
}

fn matrix_to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| to_f64(m[(i, j)])).collect())
        .collect()
}

fn rows_to_matrix<T: Scalar>(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    name: &str,
) -> Result<DMatrix<T>, ModelError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(shape_mismatch(format!("{name} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| lit(rows[i][j])))
}

impl TargetSpecJson {
    pub fn from_target<T: Scalar>(target: &TargetSpec<T>) -> Self {
        Self {
            d_y: target.d_y(),
            d_x: target.d_x(),
            sv: target.sv().iter().map(|s| to_f64(*s)).collect(),
            u: matrix_to_rows(target.u()),
            v: matrix_to_rows(target.v()),
        }
    }

    pub fn into_target<T: Scalar>(
        &self,
        tol: &Tolerances<T>,
    ) -> Result<TargetSpec<T>, ModelError> {
        let u = rows_to_matrix::<T>(&self.u, self.d_y, self.d_y, "U")?;
        let v = rows_to_matrix::<T>(&self.v, self.d_x, self.d_x, "V")?;
        let sv = DVector::from_vec(self.sv.iter().copied().map(lit::<T>).collect());
        target_from_factors(u, sv, v, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_orthogonal, random_unit_vector, seeded};

    fn tol() -> Tolerances<f64> {
        Tolerances::default()
    }

    fn diag_target(sv: &[f64], d_y: usize, d_x: usize) -> TargetSpec<f64> {
        target_from_factors(
            DMatrix::identity(d_y, d_y),
            DVector::from_row_slice(sv),
            DMatrix::identity(d_x, d_x),
            &tol(),
        )
        .expect("valid diagonal target")
    }

    #[test]
    fn diagonal_target_reconstructs() {
        let t = diag_target(&[2.0, 1.0], 2, 2);
        assert_eq!(t.z()[(0, 0)], 2.0);
        assert_eq!(t.z()[(1, 1)], 1.0);
        assert_eq!(t.z()[(0, 1)], 0.0);
        assert_eq!(t.z1()[(0, 0)], 2.0);
        assert_eq!(t.z1()[(1, 1)], 0.0);
        assert_eq!(t.s1(), 2.0);
        assert_eq!(t.s2(), 1.0);
        assert_eq!(t.sv_or_zero(5), 0.0);
    }

    #[test]
    fn random_factors_reconstruct_within_tolerance() {
        let mut rng = seeded(1, "model");
        let u = random_orthogonal::<f64, _>(&mut rng, 4);
        let v = random_orthogonal::<f64, _>(&mut rng, 3);
        let sv = DVector::from_row_slice(&[2.5, 1.2, 0.4]);
        let t = target_from_factors(u.clone(), sv.clone(), v.clone(), &tol()).unwrap();
        let mut z = DMatrix::zeros(4, 3);
        for j in 0..3 {
            z += u.column(j) * v.column(j).transpose() * sv[j];
        }
        assert!(max_abs(&(t.z() - z)) < 1e-12);
    }

    #[test]
    fn equal_singular_values_are_rejected_as_gap_too_small() {
        let err = target_from_factors(
            DMatrix::<f64>::identity(2, 2),
            DVector::from_row_slice(&[1.0, 1.0]),
            DMatrix::identity(2, 2),
            &tol(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::GapTooSmall { .. }), "{err}");
        assert!(err.to_string().contains("GapTooSmall"));
    }

    #[test]
    fn increasing_or_nonpositive_singular_values_are_rejected() {
        let err = target_from_factors(
            DMatrix::<f64>::identity(2, 2),
            DVector::from_row_slice(&[1.0, 2.0]),
            DMatrix::identity(2, 2),
            &tol(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NonDecreasingSingularValues));
        let err = target_from_factors(
            DMatrix::<f64>::identity(2, 2),
            DVector::from_row_slice(&[1.0, 0.0]),
            DMatrix::identity(2, 2),
            &tol(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NonDecreasingSingularValues));
    }

    #[test]
    fn skewed_factor_is_rejected() {
        let mut u = DMatrix::<f64>::identity(3, 3);
        u[(0, 1)] = 0.01;
        let err = target_from_factors(
            u,
            DVector::from_row_slice(&[2.0, 1.0]),
            DMatrix::identity(3, 3),
            &tol(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NotOrthogonal { side: 'U', .. }));
    }

    #[test]
    fn target_from_data_matches_eigen_oracle() {
        let mut rng = seeded(2, "data");
        let y = DMatrix::<f64>::from_fn(3, 4, |_, _| crate::rng::standard_normal(&mut rng));
        let x = DMatrix::<f64>::identity(4, 4);
        let t = target_from_data(&y, &x, &tol()).unwrap();
        assert_eq!(t.d(), 3);
        // Independent oracle: singular values are square roots of the
        // eigenvalues of Z^T Z.
        let zt_z = t.z().transpose() * t.z();
        let mut eigs: Vec<f64> = zt_z.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for j in 0..3 {
            assert!((t.sv()[j] - eigs[j].max(0.0).sqrt()).abs() < 1e-10);
        }
        assert!(orthogonality_residual(t.u()) < 1e-12);
        assert!(orthogonality_residual(t.v()) < 1e-12);
        assert!(max_abs(&(t.z() - &y)) < 1e-12, "X = I means Z = Y");
    }

    #[test]
    fn unwhitened_data_is_rejected() {
        let y = DMatrix::<f64>::zeros(2, 3);
        let x = DMatrix::<f64>::from_fn(3, 3, |i, j| if i == j { 1.1 } else { 0.0 });
        let err = target_from_data(&y, &x, &tol()).unwrap_err();
        assert!(matches!(err, ModelError::NotWhitened { .. }));
    }

    #[test]
    fn unit_vector_chain_collapses_to_outer_product() {
        let mut rng = seeded(3, "chain");
        let widths = [4usize, 3, 1, 5, 2];
        let hs: Vec<DVector<f64>> =
            widths.iter().map(|w| random_unit_vector(&mut rng, *w)).collect();
        let layers: Vec<DMatrix<f64>> =
            (0..4).map(|i| &hs[i + 1] * hs[i].transpose()).collect();
        let stack = LayerStack::new(layers).unwrap();
        let w = induced_weight(&stack);
        let expect = &hs[4] * hs[0].transpose();
        assert!(max_abs(&(w - expect)) < 1e-14);
        assert!(balancedness_residual(&stack) < 1e-14);
    }

    #[test]
    fn mismatched_layer_shapes_are_rejected() {
        let layers = vec![DMatrix::<f64>::zeros(3, 2), DMatrix::<f64>::zeros(4, 4)];
        assert!(matches!(
            LayerStack::new(layers),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn network_widths_are_validated() {
        assert!(NetworkSpec::new(vec![3, 1, 2]).is_ok());
        assert!(NetworkSpec::new(vec![3, 2]).is_err(), "too shallow");
        assert!(NetworkSpec::new(vec![3, 2, 2]).is_err(), "no width-one layer");
        let net = NetworkSpec::new(vec![2, 1, 3]).unwrap();
        assert_eq!(net.depth(), 2);
        let t = diag_target(&[2.0, 1.0], 3, 2);
        assert!(net.matches_target(&t).is_ok());
        let t_bad = diag_target(&[2.0, 1.0], 2, 3);
        assert!(net.matches_target(&t_bad).is_err());
    }

    #[test]
    fn rank_one_svd_round_trips_with_sign_convention() {
        let mut rng = seeded(4, "rank1");
        for _ in 0..20 {
            let u = random_unit_vector::<f64, _>(&mut rng, 5);
            let v = random_unit_vector::<f64, _>(&mut rng, 4);
            let s = 3.25;
            let w = &u * v.transpose() * s;
            let r1 = rank_one_svd(&w, &tol()).unwrap();
            assert!((r1.s - s).abs() < 1e-12);
            let (ru, rv) = r1.dirs.unwrap();
            let mut arg = 0;
            for i in 1..ru.len() {
                if ru[i].abs() > ru[arg].abs() {
                    arg = i;
                }
            }
            assert!(ru[arg] > 0.0, "sign convention");
            let recon = &ru * rv.transpose() * r1.s;
            assert!(max_abs(&(recon - w)) < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_has_zero_scale_and_no_directions() {
        let w = DMatrix::<f64>::zeros(3, 2);
        let r1 = rank_one_svd(&w, &tol()).unwrap();
        assert_eq!(r1.s, 0.0);
        assert!(r1.dirs.is_none());
    }

    #[test]
    fn rank_two_matrix_is_rejected() {
        let t = diag_target(&[2.0, 1.0], 2, 2);
        let err = rank_one_svd(t.z(), &tol()).unwrap_err();
        assert!(matches!(err, ModelError::NotRankOne { .. }));
    }

    #[test]
    fn coordinates_preserve_norms_and_reconstruct() {
        let mut rng = seeded(5, "coords");
        let u_basis = random_orthogonal::<f64, _>(&mut rng, 4);
        let v_basis = random_orthogonal::<f64, _>(&mut rng, 3);
        let t = target_from_factors(
            u_basis.clone(),
            DVector::from_row_slice(&[2.0, 1.0]),
            v_basis.clone(),
            &tol(),
        )
        .unwrap();
        let u = random_unit_vector::<f64, _>(&mut rng, 4);
        let v = random_unit_vector::<f64, _>(&mut rng, 3);
        let st = coords_from_uv(&t, 1.5, &u, &v, &tol()).unwrap();
        assert!((st.a.norm() - 1.0).abs() < 1e-12);
        assert!((st.b.norm() - 1.0).abs() < 1e-12);
        assert!((&u_basis * &st.a - u).norm() < 1e-12);
        assert!((&v_basis * &st.b - v).norm() < 1e-12);
    }

    #[test]
    fn non_unit_directions_are_rejected() {
        let t = diag_target(&[2.0, 1.0], 2, 2);
        let u = DVector::from_row_slice(&[1.0, 1.0]);
        let v = DVector::from_row_slice(&[1.0, 0.0]);
        let err = coords_from_uv(&t, 1.0, &u, &v, &tol()).unwrap_err();
        assert!(matches!(err, ModelError::NotUnit { .. }));
    }

    #[test]
    fn observables_match_hand_computation() {
        let t = diag_target(&[2.0, 1.0], 2, 2);
        let st = CoordState::new(
            1.0,
            DVector::from_row_slice(&[0.6, 0.8]),
            DVector::from_row_slice(&[0.8, 0.6]),
        );
        let (q, q1) = observables(&t, &st);
        assert!((q - 1.44).abs() < 1e-15, "q = 2*0.48 + 1*0.48");
        assert!((q1 - 0.96).abs() < 1e-15);
    }

    #[test]
    fn loss_is_zero_at_target_and_matches_coordinate_form() {
        let mut rng = seeded(6, "loss");
        let u_basis = random_orthogonal::<f64, _>(&mut rng, 3);
        let v_basis = random_orthogonal::<f64, _>(&mut rng, 3);
        let t = target_from_factors(
            u_basis,
            DVector::from_row_slice(&[2.0, 1.0]),
            v_basis,
            &tol(),
        )
        .unwrap();
        assert!(loss_from_matrix(&t, t.z(), 0.0).abs() < 1e-12);
        assert_eq!(loss_from_matrix(&t, t.z(), 0.5), 0.5);

        let u = random_unit_vector::<f64, _>(&mut rng, 3);
        let v = random_unit_vector::<f64, _>(&mut rng, 3);
        let s = 1.4;
        let st = coords_from_uv(&t, s, &u, &v, &tol()).unwrap();
        let w = &u * v.transpose() * s;
        let direct = loss_from_matrix(&t, &w, 0.0);
        let via_coords = loss_from_coords(&t, &st);
        assert!((direct - via_coords).abs() < 1e-12);
    }

    #[test]
    fn target_json_round_trips() {
        let mut rng = seeded(7, "json");
        let u = random_orthogonal::<f64, _>(&mut rng, 3);
        let v = random_orthogonal::<f64, _>(&mut rng, 2);
        let t = target_from_factors(
            u,
            DVector::from_row_slice(&[2.0, 0.7]),
            v,
            &tol(),
        )
        .unwrap();
        let json = serde_json::to_string(&TargetSpecJson::from_target(&t)).unwrap();
        let dto: TargetSpecJson = serde_json::from_str(&json).unwrap();
        let t2 = dto.into_target::<f64>(&tol()).unwrap();
        assert!(max_abs(&(t.z() - t2.z())) < 1e-12);
        let bad: Result<TargetSpecJson, _> =
            serde_json::from_str("{\"d_y\":1,\"d_x\":1,\"sv\":[1.0],\"U\":[[1.0]],\"V\":[[1.0]],\"extra\":0}");
        assert!(bad.is_err(), "unknown keys are rejected");
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coordinate_round_trip_and_cauchy_schwarz(seed in 0u64..500) {
                let mut rng = seeded(seed, "prop-model");
                let u_basis = random_orthogonal::<f64, _>(&mut rng, 4);
                let v_basis = random_orthogonal::<f64, _>(&mut rng, 5);
                let t = target_from_factors(
                    u_basis,
                    DVector::from_row_slice(&[2.0, 1.3, 0.5]),
                    v_basis,
                    &Tolerances::default(),
                ).unwrap();
                let u = random_unit_vector::<f64, _>(&mut rng, 4);
                let v = random_unit_vector::<f64, _>(&mut rng, 5);
                let st = coords_from_uv(&t, 1.0, &u, &v, &Tolerances::default()).unwrap();
                prop_assert!((st.a.norm() - 1.0).abs() < 1e-12);
                prop_assert!((st.b.norm() - 1.0).abs() < 1e-12);
                let (q, q1) = observables(&t, &st);
                prop_assert!(q.abs() <= t.s1() + 1e-12);
                prop_assert!(q1.abs() <= t.s1() + 1e-12);
                prop_assert!((q - (u.transpose() * t.z() * &v)[(0, 0)]).abs() < 1e-12);
            }
        }
    }
}
