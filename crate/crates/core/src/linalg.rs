//! Small dense helpers shared by the estimator, samplers and the NLP.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Tolerance below which a negative eigenvalue is treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    eigenvalues(m).max()
}

/// Symmetric square root `S` with `S S = m` for a PSD matrix; tiny negative
/// eigenvalues are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn require_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(what, "matrix is not square"));
    }
    if !all_finite(m.as_slice()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if !is_symmetric(m, 1e-12) {
        return Err(Error::invalid(what, "matrix is not symmetric"));
    }
    let min = min_eigenvalue(m);
    if min < -PSD_TOLERANCE * (1.0 + m.amax()) {
        return Err(Error::invalid(
            what,
            format!("matrix is not positive semidefinite (min eigenvalue {min:e})"),
        ));
    }
    Ok(())
}

pub fn require_pd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    require_psd(m, what)?;
    if m.clone().cholesky().is_none() {
        return Err(Error::invalid(what, "matrix is not positive definite"));
    }
    Ok(())
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

pub fn check_len(v: &DVector<f64>, n: usize, context: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::dim(context, n, v.len()));
    }
    Ok(())
}

pub fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, context: &str) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::dim(format!("{context} (rows)"), rows, m.nrows()));
    }
    if m.ncols() != cols {
        return Err(Error::dim(format!("{context} (cols)"), cols, m.ncols()));
    }
    Ok(())
}

/// Row-major flattening, the `vec` convention used for covariance residuals.
pub fn vec_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.nrows() * m.ncols(),
        (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])),
    )
}

pub fn diag_matrix(d: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(d))
}

pub fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::invalid(what, "ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
