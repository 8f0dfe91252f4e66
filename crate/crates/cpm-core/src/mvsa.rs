//! Minimum volume simplex fitting over projected utterance points.
//!
//! The solver maximizes log|det Q| for Q = V_tilde^-1 subject to Q P_tilde >= 0
//! (every point stays a convex combination of the vertices) and 1^T Q = c
//! (vertices stay on the data hyperplane). Initialization picks extreme data
//! columns (vertex component analysis), optionally expands that simplex about
//! its centroid, and drops strictly interior points from the constraint set.
//! Ascent steps come from a Newton solve of the linearized KKT system with a
//! projected-gradient fallback, under a backtracking line search that never
//! accepts a constraint violation beyond tolerance or an objective decrease.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::projection::{lift_to_original, ProjectionBasis};
use crate::{CpmError, Result};

/// Newton directions use a dense KKT system in K^2 variables; above this
/// vertex count the solver stays on the projected-gradient path.
const NEWTON_MAX_K: usize = 32;
/// Hard cap on the KKT system size (variables + constraints).
const KKT_MAX_DIM: usize = 3000;
/// Armijo slope fraction for the backtracking line search.
const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
const MAX_REPAIR_DOUBLINGS: usize = 20;
/// Condition estimate above which a Newton system counts as ill-conditioned.
const NEWTON_COND_LIMIT: f64 = 1e12;

/// Solver configuration. `vertex_count` is K = R + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MvsaConfig {
    pub vertex_count: usize,
    /// Simplex inflation about its centroid before the interior discard;
    /// 0 disables expansion.
    pub expansion_factor: f64,
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub constraint_tolerance: f64,
    pub rng_seed: u64,
}

impl MvsaConfig {
    pub fn new(vertex_count: usize) -> Self {
        MvsaConfig {
            vertex_count,
            expansion_factor: 0.0,
            max_iterations: 300,
            objective_tolerance: 1e-9,
            constraint_tolerance: 1e-8,
            rng_seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vertex_count < 2 {
            return Err(CpmError::Config(
                "vertex count K must be at least 2 (a one-vertex simplex is degenerate)".into(),
            ));
        }
        if self.expansion_factor < 0.0 {
            return Err(CpmError::Config("expansion factor must be >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(CpmError::Config("max_iterations must be positive".into()));
        }
        if self.objective_tolerance <= 0.0 || self.constraint_tolerance <= 0.0 {
            return Err(CpmError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Output of the vertex component analysis initialization.
#[derive(Debug, Clone)]
pub struct VcaResult {
    /// Column indices of the selected points, in selection order.
    pub selected_indices: Vec<usize>,
    /// K x K matrix of the selected columns.
    pub m0: DMatrix<f64>,
}

/// Interior-point filter outcome, indices into the column set that was tested.
#[derive(Debug, Clone)]
pub struct DiscardOutcome {
    pub retained: Vec<usize>,
    pub discarded: Vec<usize>,
}

/// Per-fit bookkeeping surfaced in manifests and reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolveDiagnostics {
    pub vca_indices: Vec<usize>,
    /// Doublings applied on top of the configured expansion to reach a
    /// feasible start.
    pub repair_doublings: usize,
    pub start_expansion: f64,
    pub discarded_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Minimum raw coefficient over constraint-set points, before clamping.
    pub min_coefficient_retained: f64,
    /// Minimum raw coefficient over discarded points, before clamping.
    pub min_coefficient_discarded: Option<f64>,
    pub clamped_entries: usize,
    /// Entries below -constraint_tolerance after convergence (reported, kept).
    pub negative_beyond_tolerance: usize,
}

/// Fitted simplex in subspace coordinates.
#[derive(Debug, Clone)]
pub struct SimplexFit {
    /// K x K inverse vertex matrix, the optimization variable.
    pub q: DMatrix<f64>,
    /// K x K vertex matrix in subspace coordinates, Q^-1.
    pub v_tilde: DMatrix<f64>,
    /// K x M convex coefficients over all input columns, clamped and
    /// renormalized to column sums of one.
    pub a: DMatrix<f64>,
    /// Equality-constraint row vector: 1^T Q = c.
    pub c: RowDVector<f64>,
    /// log|det Q| after the initial point and each accepted step.
    pub objective_trace: Vec<f64>,
    pub config: MvsaConfig,
    pub diagnostics: SolveDiagnostics,
}

/// A fit lifted back to original coordinates.
#[derive(Debug, Clone)]
pub struct SimplexModel {
    pub q: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    /// N x K vertex matrix in original (term) coordinates.
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: RowDVector<f64>,
    pub objective_trace: Vec<f64>,
    pub config: MvsaConfig,
    pub diagnostics: SolveDiagnostics,
}

impl SimplexModel {
    pub fn from_fit(fit: SimplexFit, basis: &ProjectionBasis) -> Result<Self> {
        let v = lift_to_original(&fit.v_tilde, basis)?;
        Ok(SimplexModel {
            q: fit.q,
            v_tilde: fit.v_tilde,
            v,
            a: fit.a,
            c: fit.c,
            objective_trace: fit.objective_trace,
            config: fit.config,
            diagnostics: fit.diagnostics,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.q.nrows()
    }

    /// Convex decomposition of subspace-coordinate columns against this model.
    pub fn decompose_columns(&self, p_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        decompose_with(&self.q, p_tilde, self.config.constraint_tolerance)
    }
}

/// One utterance's convex coefficient vector over the K vertices.
#[derive(Debug, Clone)]
pub struct UtteranceDecomposition {
    /// Original corpus index of the utterance.
    pub utterance_id: usize,
    pub coefficients: DVector<f64>,
}

/// Greedy extreme-point initialization.
///
/// Maintains the subspace spanned by the already selected columns; each step
/// draws a seeded random direction, projects it orthogonal to that subspace,
/// and takes the column with the largest absolute inner product (ties toward
/// the lowest column index).
pub fn vca_init(p_tilde: &DMatrix<f64>, k: usize, seed: u64) -> Result<VcaResult> {
    let (dim, m) = (p_tilde.nrows(), p_tilde.ncols());
    if k == 0 || k > dim {
        return Err(CpmError::Config(format!(
            "cannot select {k} vertices in a {dim}-dimensional coordinate system"
        )));
    }
    if m < k {
        return Err(CpmError::Degeneracy(format!(
            "need at least K={k} points, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = p_tilde.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    // orthonormal basis of span(selected columns)
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);

    while selected.len() < k {
        let mut direction = random_unit(&mut rng, dim)?;
        // Project orthogonal to the selected span; resample if the draw was
        // (numerically) inside it.
        let mut attempts = 0;
        loop {
            let mut w = direction.clone();
            for b in &basis {
                let coef = b.dot(&w);
                w -= b * coef;
            }
            let norm = w.norm();
            if norm > 1e-12 {
                direction = w / norm;
                break;
            }
            attempts += 1;
            if attempts > 16 {
                return Err(CpmError::Degeneracy(
                    "random directions keep collapsing into the selected span".into(),
                ));
            }
            direction = random_unit(&mut rng, dim)?;
        }

        let mut best_idx = None;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..m {
            let score = p_tilde.column(j).dot(&direction).abs();
            if score > best_score {
                best_score = score;
                best_idx = Some(j);
            }
        }
        let best_idx = best_idx.expect("at least one column");
        if best_score <= 1e-12 * scale.max(1.0) {
            return Err(CpmError::Degeneracy(format!(
                "fewer than {k} affinely independent points: every column is \
                 orthogonal to the search direction at step {}",
                selected.len() + 1
            )));
        }
        selected.push(best_idx);

        // extend the orthonormal basis with the new column
        let mut w = DVector::from_column_slice(p_tilde.column(best_idx).as_slice());
        for b in &basis {
            let coef = b.dot(&w);
            w -= b * coef;
        }
        let norm = w.norm();
        if norm <= 1e-12 * scale.max(1.0) {
            return Err(CpmError::Degeneracy(format!(
                "selected column {best_idx} is linearly dependent on earlier selections"
            )));
        }
        basis.push(w / norm);
    }

    let mut m0 = DMatrix::zeros(dim, k);
    for (c, &j) in selected.iter().enumerate() {
        m0.set_column(c, &p_tilde.column(j));
    }
    if dim == k {
        // affine independence check on the lifted matrix
        let col_scale: f64 = m0.column_iter().map(|c| c.norm().max(1e-300)).product();
        match log_abs_det(&m0) {
            Some(ld) if ld.exp() > 1e-10 * col_scale => {}
            _ => {
                return Err(CpmError::Degeneracy(
                    "selected columns are not affinely independent".into(),
                ))
            }
        }
    }
    Ok(VcaResult {
        selected_indices: selected,
        m0,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Result<DVector<f64>> {
    for _ in 0..64 {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return Ok(v / norm);
        }
    }
    Err(CpmError::Numerical(
        "random direction sampling kept returning zero vectors".into(),
    ))
}

/// Inflate a simplex about its vertex centroid: v -> g + (1+factor)(v - g).
pub fn expand_simplex(vertices: &DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    if factor == 0.0 {
        return vertices.clone();
    }
    let k = vertices.ncols() as f64;
    let mut centroid = DVector::zeros(vertices.nrows());
    for col in vertices.column_iter() {
        centroid += col;
    }
    centroid /= k;
    let mut out = vertices.clone();
    for mut col in out.column_iter_mut() {
        let moved = &centroid + (&col - &centroid) * (1.0 + factor);
        col.copy_from(&moved);
    }
    out
}

/// Split points into strictly interior (discarded) and the rest (retained).
///
/// A point is discarded iff all of its barycentric coordinates with respect to
/// the simplex exceed `tol` and they sum to 1 within `tol`; boundary points,
/// including the simplex vertices themselves, are retained.
pub fn discard_interior(
    p_tilde: &DMatrix<f64>,
    simplex: &DMatrix<f64>,
    tol: f64,
) -> Result<DiscardOutcome> {
    if simplex.nrows() != simplex.ncols() || simplex.nrows() != p_tilde.nrows() {
        return Err(CpmError::Shape(format!(
            "simplex must be square with the point dimension, got {}x{} vs points {}x{}",
            simplex.nrows(),
            simplex.ncols(),
            p_tilde.nrows(),
            p_tilde.ncols()
        )));
    }
    let lu = simplex.clone().lu();
    let bary = lu.solve(p_tilde).ok_or_else(|| {
        CpmError::Degeneracy("simplex is singular; cannot compute barycentric coordinates".into())
    })?;
    let mut retained = Vec::new();
    let mut discarded = Vec::new();
    for j in 0..bary.ncols() {
        let col = bary.column(j);
        let sum: f64 = col.sum();
        let strictly_inside = col.iter().all(|&b| b > tol) && (sum - 1.0).abs() <= tol;
        if strictly_inside {
            discarded.push(j);
        } else {
            retained.push(j);
        }
    }
    Ok(DiscardOutcome {
        retained,
        discarded,
    })
}

/// Fit the minimum volume simplex around the columns of `p_tilde` (K x M).
pub fn solve_mvsa(p_tilde: &DMatrix<f64>, config: &MvsaConfig) -> Result<SimplexFit> {
    config.validate()?;
    let k = config.vertex_count;
    let m = p_tilde.ncols();
    if p_tilde.nrows() != k {
        return Err(CpmError::Shape(format!(
            "point matrix has {} coordinate rows but K = {k}",
            p_tilde.nrows()
        )));
    }
    if m < k {
        return Err(CpmError::Degeneracy(format!(
            "need at least K={k} points to pin a simplex, got {m}"
        )));
    }
    if p_tilde.iter().any(|v| !v.is_finite()) {
        return Err(CpmError::Numerical("point matrix contains non-finite entries".into()));
    }

    let c = hyperplane_functional(p_tilde)?;
    let vca = vca_init(p_tilde, k, config.rng_seed)?;
    let discard_simplex = expand_simplex(&vca.m0, config.expansion_factor);
    let outcome = discard_interior(p_tilde, &discard_simplex, config.constraint_tolerance)?;

    // constraint-set points, with exact duplicate columns collapsed
    let unique_retained = dedup_columns(p_tilde, &outcome.retained);
    let mut y = DMatrix::zeros(k, unique_retained.len());
    for (c_idx, &j) in unique_retained.iter().enumerate() {
        y.set_column(c_idx, &p_tilde.column(j));
    }

    let (mut q, repair_doublings, start_expansion) =
        feasible_start(&vca.m0, &y, config)?;
    project_equality(&mut q, &c);

    let f0 = log_abs_det(&q).ok_or_else(|| {
        CpmError::Numerical("objective is not finite at the starting simplex".into())
    })?;
    let mut trace = vec![f0];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let f_cur = *trace.last().expect("trace never empty");
        let step = match ascend_once(&q, &y, &c, config, f_cur) {
            Some(s) => s,
            None => {
                converged = true;
                iterations = iter;
                break;
            }
        };
        q = step.0;
        let f_new = step.1;
        if !f_new.is_finite() {
            return Err(CpmError::Numerical(format!(
                "objective became non-finite at iteration {iterations}; trace so far: {trace:?}"
            )));
        }
        trace.push(f_new);
        if f_new - f_cur < config.objective_tolerance {
            converged = true;
            break;
        }
    }

    finalize_fit(q, c, trace, p_tilde, &outcome, vca, repair_doublings, start_expansion, iterations, converged, config)
}

/// Convex decomposition a = Q p_tilde with the solver's clamping rule.
pub fn decompose(p_tilde: &DMatrix<f64>, fit: &SimplexFit) -> Result<DMatrix<f64>> {
    decompose_with(&fit.q, p_tilde, fit.config.constraint_tolerance)
}

/// Pair coefficient columns with their original corpus ids.
pub fn decompositions_for(
    coefficients: &DMatrix<f64>,
    kept_utterance_ids: &[usize],
) -> Result<Vec<UtteranceDecomposition>> {
    if coefficients.ncols() != kept_utterance_ids.len() {
        return Err(CpmError::Shape(format!(
            "{} coefficient columns vs {} utterance ids",
            coefficients.ncols(),
            kept_utterance_ids.len()
        )));
    }
    Ok(kept_utterance_ids
        .iter()
        .enumerate()
        .map(|(col, &id)| UtteranceDecomposition {
            utterance_id: id,
            coefficients: DVector::from_column_slice(coefficients.column(col).as_slice()),
        })
        .collect())
}

fn decompose_with(q: &DMatrix<f64>, p_tilde: &DMatrix<f64>, con_tol: f64) -> Result<DMatrix<f64>> {
    if p_tilde.nrows() != q.ncols() {
        return Err(CpmError::Shape(format!(
            "points have {} coordinate rows but the model expects {}",
            p_tilde.nrows(),
            q.ncols()
        )));
    }
    let mut a = q * p_tilde;
    clamp_and_renormalize(&mut a, con_tol);
    Ok(a)
}

// ---------------------------------------------------------------------------
// solver internals
// ---------------------------------------------------------------------------

/// Equality constant c = 1^T P_K^-1 from K well-conditioned columns, chosen
/// greedily by largest orthogonal residual (pivoted elimination).
fn hyperplane_functional(p_tilde: &DMatrix<f64>) -> Result<RowDVector<f64>> {
    let (k, m) = (p_tilde.nrows(), p_tilde.ncols());
    let scale = p_tilde.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if selected.contains(&j) {
                continue;
            }
            let mut w = DVector::from_column_slice(p_tilde.column(j).as_slice());
            for b in &basis {
                let coef = b.dot(&w);
                w -= b * coef;
            }
            let norm = w.norm();
            if best.map_or(true, |(_, bn)| norm > bn) {
                best = Some((j, norm));
            }
        }
        let (j, norm) = best.ok_or_else(|| {
            CpmError::Degeneracy("ran out of candidate columns while picking P_K".into())
        })?;
        if norm <= 1e-10 * scale.max(1.0) {
            return Err(CpmError::Degeneracy(format!(
                "points span fewer than K={k} linear dimensions; cannot form the \
                 equality constraint"
            )));
        }
        let mut w = DVector::from_column_slice(p_tilde.column(j).as_slice());
        for b in &basis {
            let coef = b.dot(&w);
            w -= b * coef;
        }
        basis.push(w.clone() / w.norm());
        selected.push(j);
    }

    let mut pk = DMatrix::zeros(k, k);
    for (c_idx, &j) in selected.iter().enumerate() {
        pk.set_column(c_idx, &p_tilde.column(j));
    }
    let ones = DVector::from_element(k, 1.0);
    let c_col = pk
        .transpose()
        .lu()
        .solve(&ones)
        .ok_or_else(|| CpmError::Degeneracy("P_K is singular".into()))?;
    let c = RowDVector::from_row_slice(c_col.as_slice());

    // all points must sit on the hyperplane c x = 1
    let residual = (&c * p_tilde).iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    if residual > 1e-6 {
        return Err(CpmError::Degeneracy(format!(
            "points do not lie on a common affine hyperplane (max |c p - 1| = {residual:.3e})"
        )));
    }
    Ok(c)
}

fn dedup_columns(p_tilde: &DMatrix<f64>, indices: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(indices.len());
    for &j in indices {
        let key: Vec<u64> = p_tilde.column(j).iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(j);
        }
    }
    out
}

/// Invert the (possibly further expanded) starting simplex, doubling the
/// expansion until every constraint-set point is inside.
fn feasible_start(
    m0: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &MvsaConfig,
) -> Result<(DMatrix<f64>, usize, f64)> {
    let mut factor = config.expansion_factor;
    let mut doublings = 0usize;
    loop {
        let w = expand_simplex(m0, factor);
        if let Some(q) = w.clone().try_inverse() {
            let coeffs = &q * y;
            let min = coeffs.iter().copied().fold(f64::INFINITY, f64::min);
            if min >= -1e-12 {
                return Ok((q, doublings, factor));
            }
        }
        if doublings >= MAX_REPAIR_DOUBLINGS {
            return Err(CpmError::Infeasible(format!(
                "could not reach a feasible start after {MAX_REPAIR_DOUBLINGS} \
                 expansion doublings (last factor {factor})"
            )));
        }
        factor = if factor <= 0.0 { 0.1 } else { factor * 2.0 };
        doublings += 1;
    }
}

/// log|det M| via LU, None when singular or non-finite.
fn log_abs_det(m: &DMatrix<f64>) -> Option<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    acc.is_finite().then_some(acc)
}

/// Project Q onto the affine set {1^T Q = c} (minimal Frobenius correction).
fn project_equality(q: &mut DMatrix<f64>, c: &RowDVector<f64>) {
    let k = q.nrows() as f64;
    for j in 0..q.ncols() {
        let delta = (c[j] - q.column(j).sum()) / k;
        for i in 0..q.nrows() {
            q[(i, j)] += delta;
        }
    }
}

struct Direction {
    d: DMatrix<f64>,
    /// gradient inner product <grad f, d>
    slope: f64,
    from_newton: bool,
}

/// One accepted ascent step, or None when the iterate is stationary.
fn ascend_once(
    q: &DMatrix<f64>,
    y: &DMatrix<f64>,
    c: &RowDVector<f64>,
    config: &MvsaConfig,
    f_cur: f64,
) -> Option<(DMatrix<f64>, f64)> {
    let k = q.nrows();
    let q_inv = q.clone().try_inverse()?;
    let grad = q_inv.transpose();
    let coeffs = q * y;
    let act_tol = config.constraint_tolerance;

    let mut active: Vec<(usize, usize)> = Vec::new();
    for j in 0..coeffs.ncols() {
        for i in 0..k {
            if coeffs[(i, j)] <= act_tol {
                active.push((i, j));
            }
        }
    }

    // Direction search with constraint release: when the projected gradient
    // vanishes, constraints whose multiplier has the wrong sign are dropped.
    let g_norm = grad.norm();
    let mut drops = 0usize;
    let direction = loop {
        let cmat = constraint_matrix(k, y, &active);
        let (d_grad, mu) = project_gradient(&cmat, &grad)?;
        if d_grad.norm() > 1e-10 * (1.0 + g_norm) {
            let newton = if k <= NEWTON_MAX_K {
                newton_direction(&q_inv, &grad, &cmat)
            } else {
                None
            };
            match newton {
                Some(dn) => break dn,
                None => {
                    let slope = inner(&grad, &d_grad);
                    break Direction {
                        d: d_grad,
                        slope,
                        from_newton: false,
                    };
                }
            }
        }
        // stationary against the current active set: look for a releasable
        // constraint (multiplier of the wrong sign for a maximum)
        let n_eq = k;
        let mut worst: Option<(usize, f64)> = None;
        for (idx, _) in active.iter().enumerate() {
            let m = mu[n_eq + idx];
            if m > 1e-9 * (1.0 + g_norm) && worst.map_or(true, |(_, wm)| m > wm) {
                worst = Some((idx, m));
            }
        }
        match worst {
            Some((idx, _)) if drops < active.len() + 1 => {
                active.remove(idx);
                drops += 1;
            }
            _ => return None, // KKT point
        }
    };

    line_search(q, y, c, config, f_cur, &coeffs, &active, direction)
}

/// Rows: K column-sum-zero equalities, then one row per active coefficient.
/// Variables: vec(D) column-major, length K^2.
fn constraint_matrix(k: usize, y: &DMatrix<f64>, active: &[(usize, usize)]) -> DMatrix<f64> {
    let rows = k + active.len();
    let mut cmat = DMatrix::zeros(rows, k * k);
    for jc in 0..k {
        for i in 0..k {
            cmat[(jc, i + k * jc)] = 1.0;
        }
    }
    for (row, &(i, jy)) in active.iter().enumerate() {
        for n in 0..k {
            cmat[(k + row, i + k * n)] = y[(n, jy)];
        }
    }
    cmat
}

/// Project the gradient onto the nullspace of the constraints.
/// Returns the projected direction and the multiplier estimate.
fn project_gradient(cmat: &DMatrix<f64>, grad: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let k = grad.nrows();
    let g_vec = DVector::from_column_slice(grad.as_slice());
    let cg = cmat * &g_vec;
    let mut gram = cmat * cmat.transpose();
    let ridge = 1e-12 * (gram.trace() / gram.nrows() as f64).max(1e-300);
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let mu = gram.lu().solve(&cg)?;
    let d_vec = &g_vec - cmat.transpose() * &mu;
    let d = DMatrix::from_column_slice(k, k, d_vec.as_slice());
    Some((d, mu))
}

/// Newton direction from the KKT system of the quadratic model of log|det Q|
/// under the linearized constraints. None when the system is ill-conditioned,
/// singular, too large, or yields a non-ascent direction.
fn newton_direction(
    q_inv: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    cmat: &DMatrix<f64>,
) -> Option<Direction> {
    let k = grad.nrows();
    let n_var = k * k;
    let n_con = cmat.nrows();
    let dim = n_var + n_con;
    if dim > KKT_MAX_DIM {
        return None;
    }

    // Hessian of log|det Q|: H[(i,j),(l,t)] = -B[j,l] * B[t,i] with B = Q^-1.
    let mut kkt = DMatrix::zeros(dim, dim);
    for j in 0..k {
        for i in 0..k {
            let a = i + k * j;
            for t in 0..k {
                for l in 0..k {
                    let b = l + k * t;
                    kkt[(a, b)] = -q_inv[(j, l)] * q_inv[(t, i)];
                }
            }
        }
    }
    for r in 0..n_con {
        for v in 0..n_var {
            kkt[(n_var + r, v)] = cmat[(r, v)];
            kkt[(v, n_var + r)] = cmat[(r, v)];
        }
    }

    let mut rhs = DVector::zeros(dim);
    for (i, &g) in grad.as_slice().iter().enumerate() {
        rhs[i] = -g;
    }

    let lu = kkt.lu();
    let u = lu.u();
    let mut dmax = 0.0f64;
    let mut dmin = f64::INFINITY;
    for i in 0..dim {
        let d = u[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if dmin <= 0.0 || dmax / dmin > NEWTON_COND_LIMIT {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    let d = DMatrix::from_column_slice(k, k, &sol.as_slice()[..n_var]);
    if d.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let slope = inner(grad, &d);
    if slope <= 1e-12 * grad.norm() * d.norm() {
        return None;
    }
    Some(Direction {
        d,
        slope,
        from_newton: true,
    })
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Backtracking line search with an exact ratio test against the inequality
/// constraints. Accepts only feasible steps that do not decrease the objective.
#[allow(clippy::too_many_arguments)]
fn line_search(
    q: &DMatrix<f64>,
    y: &DMatrix<f64>,
    c: &RowDVector<f64>,
    config: &MvsaConfig,
    f_cur: f64,
    coeffs: &DMatrix<f64>,
    active: &[(usize, usize)],
    direction: Direction,
) -> Option<(DMatrix<f64>, f64)> {
    let k = q.nrows();
    let dp = &direction.d * y;
    let mut is_active = vec![false; k * y.ncols()];
    for &(i, j) in active {
        is_active[i + k * j] = true;
    }

    // largest step that keeps every inactive constraint non-negative
    let mut alpha_max = f64::INFINITY;
    for j in 0..y.ncols() {
        for i in 0..k {
            if is_active[i + k * j] {
                continue;
            }
            let slope = dp[(i, j)];
            if slope < 0.0 {
                let room = coeffs[(i, j)].max(0.0);
                alpha_max = alpha_max.min(room / -slope);
            }
        }
    }

    let mut alpha = if direction.from_newton {
        alpha_max.min(1.0)
    } else if alpha_max.is_finite() {
        alpha_max
    } else {
        // unblocked gradient direction: scale the first probe to the iterate
        (q.norm() / direction.d.norm().max(1e-300)).min(1.0e3)
    };
    if !(alpha > 0.0) || !alpha.is_finite() {
        return None;
    }

    for _ in 0..=MAX_HALVINGS {
        let mut q_try = q + &direction.d * alpha;
        project_equality(&mut q_try, c);
        let a_try = &q_try * y;
        let feasible = a_try
            .iter()
            .all(|&v| v >= -config.constraint_tolerance);
        if feasible {
            if let Some(f_try) = log_abs_det(&q_try) {
                if f_try >= f_cur + ARMIJO_C1 * alpha * direction.slope {
                    return Some((q_try, f_try));
                }
            }
        }
        alpha *= 0.5;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn finalize_fit(
    q: DMatrix<f64>,
    c: RowDVector<f64>,
    trace: Vec<f64>,
    p_tilde: &DMatrix<f64>,
    outcome: &DiscardOutcome,
    vca: VcaResult,
    repair_doublings: usize,
    start_expansion: f64,
    iterations: usize,
    converged: bool,
    config: &MvsaConfig,
) -> Result<SimplexFit> {
    let v_tilde = q.clone().try_inverse().ok_or_else(|| {
        CpmError::Numerical("final Q is singular; cannot recover the vertex matrix".into())
    })?;

    let raw = &q * p_tilde;
    let min_over = |idx: &[usize]| -> f64 {
        idx.iter()
            .flat_map(|&j| raw.column(j).iter().copied().collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    };
    let min_retained = min_over(&outcome.retained);
    let min_discarded = if outcome.discarded.is_empty() {
        None
    } else {
        Some(min_over(&outcome.discarded))
    };
    let negative_beyond_tolerance = raw
        .iter()
        .filter(|&&v| v < -config.constraint_tolerance)
        .count();

    let mut a = raw;
    let clamped = clamp_and_renormalize(&mut a, config.constraint_tolerance);

    Ok(SimplexFit {
        q,
        v_tilde,
        a,
        c,
        objective_trace: trace,
        config: config.clone(),
        diagnostics: SolveDiagnostics {
            vca_indices: vca.selected_indices,
            repair_doublings,
            start_expansion,
            discarded_count: outcome.discarded.len(),
            iterations,
            converged,
            min_coefficient_retained: min_retained,
            min_coefficient_discarded: min_discarded,
            clamped_entries: clamped,
            negative_beyond_tolerance,
        },
    })
}

/// Zero out tolerance-level negatives and renormalize columns to sum one.
/// Returns the number of clamped entries.
fn clamp_and_renormalize(a: &mut DMatrix<f64>, con_tol: f64) -> usize {
    let mut clamped = 0usize;
    for v in a.iter_mut() {
        if *v < 0.0 && *v > -con_tol {
            *v = 0.0;
            clamped += 1;
        }
    }
    for mut col in a.column_iter_mut() {
        let s: f64 = col.iter().sum();
        if s != 0.0 {
            col /= s;
        }
    }
    clamped
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Lift planar points onto the z = 1 hyperplane so minimum simplex volume
    /// equals minimum triangle area (up to the fixed factor 1/2).
    pub fn lift_planar(points: &[(f64, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(3, points.len(), |r, j| match r {
            0 => points[j].0,
            1 => points[j].1,
            _ => 1.0,
        })
    }

    fn lift_line(points: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(2, points.len(), |r, j| if r == 0 { points[j] } else { 1.0 })
    }

    #[test]
    fn vca_picks_triangle_vertices_not_centroid() {
        let pts = lift_planar(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0 / 3.0, 1.0 / 3.0)]);
        for seed in 0..20 {
            let res = vca_init(&pts, 3, seed).unwrap();
            let mut idx = res.selected_indices.clone();
            idx.sort_unstable();
            assert_eq!(idx, vec![0, 1, 2], "seed {seed} selected {idx:?}");
        }
    }

    #[test]
    fn vca_k1_takes_extreme_projection() {
        let pts = lift_planar(&[(0.0, 0.0), (10.0, 0.0), (0.2, 0.1)]);
        let res = vca_init(&pts, 1, 7).unwrap();
        assert_eq!(res.selected_indices.len(), 1);
        // column 1 dominates every direction with a nonzero x/z component
        assert_eq!(res.selected_indices[0], 1);
    }

    #[test]
    fn vca_is_deterministic_per_seed() {
        let pts = lift_planar(&[
            (0.1, 0.2),
            (0.9, 0.1),
            (0.4, 0.8),
            (0.5, 0.5),
            (0.2, 0.6),
        ]);
        let a = vca_init(&pts, 3, 42).unwrap();
        let b = vca_init(&pts, 3, 42).unwrap();
        assert_eq!(a.selected_indices, b.selected_indices);
    }

    #[test]
    fn vca_rejects_coincident_points() {
        let pts = lift_planar(&[(0.5, 0.5); 4]);
        assert!(matches!(
            vca_init(&pts, 3, 1),
            Err(CpmError::Degeneracy(_))
        ));
    }

    #[test]
    fn expand_zero_is_identity() {
        let m = lift_planar(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let e = expand_simplex(&m, 0.0);
        assert_eq!(m, e);
    }

    #[test]
    fn expand_scales_distance_from_centroid() {
        let m = lift_planar(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let e = expand_simplex(&m, 0.2);
        let centroid = DVector::from_vec(vec![1.0 / 3.0, 1.0 / 3.0, 1.0]);
        for j in 0..3 {
            let before = (m.column(j) - &centroid).norm();
            let after = (e.column(j) - &centroid).norm();
            assert!((after / before - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_preserves_containment() {
        use rand::Rng;
        let m = lift_planar(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let e = expand_simplex(&m, 0.2);
        let lu_m = m.clone().lu();
        let lu_e = e.clone().lu();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            // random point of the original simplex
            let mut w = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let p = DVector::from_vec(vec![w[1], w[2], 1.0]);
            let b_m = lu_m.solve(&p).unwrap();
            let b_e = lu_e.solve(&p).unwrap();
            assert!(b_m.iter().all(|&v| v >= -1e-12));
            assert!(b_e.iter().all(|&v| v >= -1e-12), "expanded lost a point");
        }
    }

    #[test]
    fn discard_keeps_boundary_and_outside_points() {
        let simplex = lift_planar(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let pts = lift_planar(&[
            (1.0 / 3.0, 1.0 / 3.0), // centroid: strictly interior
            (0.0, 0.0),             // a vertex: boundary
            (2.0, 2.0),             // outside
            (0.5, 0.0),             // edge midpoint: boundary
        ]);
        let out = discard_interior(&pts, &simplex, 1e-8).unwrap();
        assert_eq!(out.discarded, vec![0]);
        assert_eq!(out.retained, vec![1, 2, 3]);
    }

    #[test]
    fn discard_rejects_singular_simplex() {
        let simplex = lift_planar(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        let pts = lift_planar(&[(0.5, 0.5)]);
        assert!(matches!(
            discard_interior(&pts, &simplex, 1e-8),
            Err(CpmError::Degeneracy(_))
        ));
    }

    #[test]
    fn k2_converges_to_extreme_interval() {
        let xs: Vec<f64> = vec![0.3, -0.7, 0.95, 0.1, -0.2, 0.5, -0.69, 0.8];
        let pts = lift_line(&xs);
        let mut config = MvsaConfig::new(2);
        config.rng_seed = 3;
        let fit = solve_mvsa(&pts, &config).unwrap();
        let mut ends: Vec<f64> = (0..2).map(|j| fit.v_tilde[(0, j)]).collect();
        ends.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ends[0] - -0.7).abs() < 1e-6, "left end {}", ends[0]);
        assert!((ends[1] - 0.95).abs() < 1e-6, "right end {}", ends[1]);
        // second coordinate stays on the hyperplane
        for j in 0..2 {
            assert!((fit.v_tilde[(1, j)] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let pts = lift_planar(&[
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (0.3, 0.3),
            (0.7, 0.2),
            (0.1, 0.6),
            (0.45, 0.45),
        ]);
        let fit = solve_mvsa(&pts, &MvsaConfig::new(3)).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {:?}", w);
        }
    }

    #[test]
    fn fit_is_deterministic_bit_for_bit() {
        let pts = lift_planar(&[
            (0.0, 0.1),
            (0.9, 0.0),
            (0.2, 0.8),
            (0.4, 0.3),
            (0.6, 0.35),
        ]);
        let mut config = MvsaConfig::new(3);
        config.rng_seed = 11;
        let f1 = solve_mvsa(&pts, &config).unwrap();
        let f2 = solve_mvsa(&pts, &config).unwrap();
        assert_eq!(f1.q, f2.q);
        assert_eq!(f1.a, f2.a);
        assert_eq!(f1.objective_trace, f2.objective_trace);
    }

    #[test]
    fn decompose_vertex_is_one_hot() {
        let pts = lift_planar(&[
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (0.2, 0.2),
            (0.5, 0.25),
        ]);
        let fit = solve_mvsa(&pts, &MvsaConfig::new(3)).unwrap();
        let a = decompose(&fit.v_tilde, &fit).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (a[(i, j)] - expect).abs() < 1e-6,
                    "vertex {j} coefficient {i} = {}",
                    a[(i, j)]
                );
            }
        }
    }

    #[test]
    fn decompose_centroid_is_uniform() {
        let pts = lift_planar(&[
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (0.25, 0.3),
            (0.6, 0.2),
        ]);
        let fit = solve_mvsa(&pts, &MvsaConfig::new(3)).unwrap();
        let mut centroid = DVector::zeros(3);
        for j in 0..3 {
            centroid += fit.v_tilde.column(j);
        }
        centroid /= 3.0;
        let a = decompose(&DMatrix::from_column_slice(3, 1, centroid.as_slice()), &fit).unwrap();
        for i in 0..3 {
            assert!((a[(i, 0)] - 1.0 / 3.0).abs() < 1e-8);
        }
    }

    #[test]
    fn decompose_recovers_forward_weights() {
        let pts = lift_planar(&[
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (0.3, 0.4),
            (0.55, 0.1),
        ]);
        let fit = solve_mvsa(&pts, &MvsaConfig::new(3)).unwrap();
        let w = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let p = &fit.v_tilde * &w;
        let a = decompose(&DMatrix::from_column_slice(3, 1, p.as_slice()), &fit).unwrap();
        for i in 0..3 {
            assert!((a[(i, 0)] - w[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_k1_and_too_few_points() {
        let pts = lift_planar(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(matches!(
            solve_mvsa(&lift_line(&[0.0]), &MvsaConfig::new(1)),
            Err(CpmError::Config(_))
        ));
        assert!(matches!(
            solve_mvsa(&pts, &MvsaConfig::new(3)),
            Err(CpmError::Degeneracy(_))
        ));
    }

    #[test]
    fn reconstruction_holds_on_random_cloud() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.gen::<f64>() * 2.0 - 0.5, rng.gen::<f64>() * 1.5))
            .collect();
        let p = lift_planar(&pts);
        let fit = solve_mvsa(&p, &MvsaConfig::new(3)).unwrap();
        let recon = &fit.v_tilde * &fit.a;
        let rel = (&recon - &p).norm() / p.norm();
        assert!(rel <= 1e-6, "relative reconstruction {rel}");
        assert!(fit.a.iter().all(|&v| v >= -1e-8));
        for j in 0..fit.a.ncols() {
            assert!((fit.a.column(j).sum() - 1.0).abs() <= 1e-8);
        }
    }
}
