//! PCA projection of utterance columns onto the closest R-dimensional affine
//! subspace, plus the augmented (R+1)-dimensional coordinate transform used by
//! the simplex solver.

use nalgebra::{DMatrix, DVector};

use crate::corpus::TermUtteranceMatrix;
use crate::{CpmError, Result};

/// Relative singular value below which a direction counts as numerically null.
const RANK_TOL: f64 = 1e-12;

/// Orthonormal PCA basis plus the displacement axis that closes the affine
/// subspace into a K = R+1 dimensional coordinate system.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    /// N x R principal axes, descending singular value order.
    pub u: DMatrix<f64>,
    /// Column mean of the matrix the basis was fitted on.
    pub x_bar: DVector<f64>,
    /// Unit vector along the component of `x_bar` orthogonal to span(U).
    pub u_orth: DVector<f64>,
    /// N x K augmented basis [U | u_orth].
    pub u_tilde: DMatrix<f64>,
    pub r: usize,
    /// Singular values of the centered matrix, descending.
    pub singular_values: Vec<f64>,
    /// True when x_bar lay in span(U) and u_orth fell back to the
    /// (R+1)-th singular vector.
    pub u_orth_fallback: bool,
}

impl ProjectionBasis {
    pub fn n_terms(&self) -> usize {
        self.u.nrows()
    }

    /// K = R + 1.
    pub fn k(&self) -> usize {
        self.r + 1
    }
}

/// Projected utterance points in both coordinate systems.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoints {
    /// N x M points in original coordinates; columns keep the sum-to-one property.
    pub p: DMatrix<f64>,
    /// K x M subspace coordinates, P_tilde = U_tilde^T * P.
    pub p_tilde: DMatrix<f64>,
}

impl ProjectedPoints {
    pub fn n_points(&self) -> usize {
        self.p.ncols()
    }
}

/// Fit the PCA basis of the centered matrix X - x_bar 1^T.
///
/// U holds the first R left singular vectors in descending singular value
/// order. Sign convention: the entry of largest magnitude in each column is
/// non-negative (ties resolved toward the lowest index) so repeated runs
/// produce identical bases.
pub fn fit_projection(matrix: &TermUtteranceMatrix, r: usize) -> Result<ProjectionBasis> {
    let x = &matrix.x;
    let (n, m) = (x.nrows(), x.ncols());
    if r < 1 {
        return Err(CpmError::Config("subspace dimension R must be >= 1".into()));
    }
    if n < 2 || m < 2 {
        return Err(CpmError::Config(format!(
            "need at least 2 terms and 2 utterances, got {n} x {m}"
        )));
    }
    if r > n - 1 || r > m - 1 {
        return Err(CpmError::Config(format!(
            "R={r} out of range, must satisfy 1 <= R <= min(N-1, M-1) = {}",
            (n - 1).min(m - 1)
        )));
    }

    let x_bar = column_mean(x);
    let centered = center(x, &x_bar);

    // SVD of the centered matrix directly; stable for both N >> M and M >> N.
    let svd = centered.svd(true, false);
    let u_full = svd
        .u
        .ok_or_else(|| CpmError::Numerical("SVD did not produce left singular vectors".into()))?;
    let sigma = svd.singular_values;

    // Defensive descending order (stable on ties).
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap_or(std::cmp::Ordering::Equal));
    let singular_values: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();

    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let attainable = singular_values
        .iter()
        .take_while(|&&s| sigma_max > 0.0 && s / sigma_max >= RANK_TOL)
        .count();
    if attainable < r {
        return Err(CpmError::RankDeficiency {
            requested: r,
            attainable,
        });
    }

    let mut u = DMatrix::zeros(n, r);
    for (col, &src) in order.iter().take(r).enumerate() {
        u.set_column(col, &u_full.column(src));
    }
    fix_signs(&mut u);

    // Displacement axis: component of the mean orthogonal to span(U).
    let ut_xbar = u.transpose() * &x_bar;
    let u0 = &x_bar - &u * ut_xbar;
    let u0_norm = u0.norm();
    let mut u_orth_fallback = false;
    let u_orth = if u0_norm > 1e-10 * x_bar.norm().max(1.0) {
        u0 / u0_norm
    } else {
        // x_bar lies in span(U); fall back to the next singular vector.
        u_orth_fallback = true;
        if attainable < r + 1 || order.len() < r + 1 {
            return Err(CpmError::Degeneracy(
                "mean lies in span(U) and no further singular vector is available \
                 to span the displacement axis"
                    .into(),
            ));
        }
        let mut extra = DMatrix::zeros(n, 1);
        extra.set_column(0, &u_full.column(order[r]));
        fix_signs(&mut extra);
        DVector::from_column_slice(extra.column(0).as_slice())
    };

    let mut u_tilde = DMatrix::zeros(n, r + 1);
    for c in 0..r {
        u_tilde.set_column(c, &u.column(c));
    }
    u_tilde.set_column(r, &u_orth);

    Ok(ProjectionBasis {
        u,
        x_bar,
        u_orth,
        u_tilde,
        r,
        singular_values,
        u_orth_fallback,
    })
}

/// Project the columns of X onto the affine subspace:
/// P = x_bar 1^T + U U^T (X - x_bar 1^T), with subspace coordinates
/// P_tilde = U_tilde^T P.
pub fn project_points(
    matrix: &TermUtteranceMatrix,
    basis: &ProjectionBasis,
) -> Result<ProjectedPoints> {
    project_columns(&matrix.x, basis)
}

/// Same as [`project_points`] for a bare matrix of column points.
pub fn project_columns(x: &DMatrix<f64>, basis: &ProjectionBasis) -> Result<ProjectedPoints> {
    if x.nrows() != basis.n_terms() {
        return Err(CpmError::Shape(format!(
            "matrix has {} rows but the basis was fitted on {}",
            x.nrows(),
            basis.n_terms()
        )));
    }
    let centered = center(x, &basis.x_bar);
    let coeffs = basis.u.transpose() * &centered;
    let mut p = &basis.u * coeffs;
    for mut col in p.column_iter_mut() {
        col += &basis.x_bar;
    }
    let p_tilde = basis.u_tilde.transpose() * &p;
    Ok(ProjectedPoints { p, p_tilde })
}

/// Lift subspace coordinates back to original coordinates: U_tilde * coords.
pub fn lift_to_original(coords: &DMatrix<f64>, basis: &ProjectionBasis) -> Result<DMatrix<f64>> {
    if coords.nrows() != basis.k() {
        return Err(CpmError::Shape(format!(
            "coordinate matrix has {} rows, expected K = {}",
            coords.nrows(),
            basis.k()
        )));
    }
    Ok(&basis.u_tilde * coords)
}

fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let m = x.ncols() as f64;
    let mut mean = DVector::zeros(x.nrows());
    for col in x.column_iter() {
        mean += col;
    }
    mean / m
}

fn center(x: &DMatrix<f64>, x_bar: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= x_bar;
    }
    c
}

/// Flip each column so its largest-magnitude entry is non-negative
/// (ties toward the lowest index).
fn fix_signs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}
