//! Online parameter identification by recursive least squares with a
//! forgetting factor, plus the batch weighted least-squares problem it solves
//! recursively.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{self, check_shape};

/// Running estimate `p_hat` with its information-weighted covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub p_hat: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub gamma: f64,
}

/// Quantities of one update that the reverse sweep reuses.
#[derive(Debug, Clone)]
pub(crate) struct RlsIntermediates {
    /// `P Gamma^T`
    pub cov_gt: DMatrix<f64>,
    /// Factor of `gamma I + Gamma P Gamma^T`.
    pub gain_chol: Cholesky<f64, Dyn>,
    /// `(gamma I + Gamma P Gamma^T)^{-1} Gamma P`
    pub solved: DMatrix<f64>,
    /// `residual - Gamma p_hat`
    pub innovation: DVector<f64>,
    pub min_pivot: f64,
}

impl EstimatorState {
    pub fn new(p_hat: DVector<f64>, cov: DMatrix<f64>, gamma: f64) -> Result<Self> {
        check_shape(&cov, p_hat.len(), p_hat.len(), "estimator covariance")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid("forgetting factor", format!("{gamma} not in (0, 1]")));
        }
        linalg::require_psd(&cov, "estimator covariance")?;
        Ok(Self {
            p_hat,
            cov: linalg::symmetrize(&cov),
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.p_hat.len()
    }

    /// One recursive least-squares update with regressor `Gamma` and target
    /// `residual` (next state minus the known part of the dynamics).
    pub fn rls_update(&self, gamma_mat: &DMatrix<f64>, residual: &DVector<f64>) -> Result<EstimatorState> {
        check_shape(gamma_mat, residual.len(), self.dim(), "regressor")?;
        if !linalg::all_finite(gamma_mat.as_slice()) || !linalg::all_finite(residual.as_slice()) {
            return Err(Error::NonFinite("estimator update input".into()));
        }
        self.update_detailed(gamma_mat, residual).map(|(s, _)| s)
    }

    pub(crate) fn update_detailed(
        &self,
        gamma_mat: &DMatrix<f64>,
        residual: &DVector<f64>,
    ) -> Result<(EstimatorState, RlsIntermediates)> {
        let n_x = gamma_mat.nrows();
        let g = self.gamma;
        let cov_gt = &self.cov * gamma_mat.transpose();
        let gain = DMatrix::identity(n_x, n_x) * g + gamma_mat * &cov_gt;
        let gain_chol = gain.clone().cholesky().ok_or_else(|| {
            Error::Conditioning(format!(
                "gamma I + Gamma P Gamma^T is not numerically positive definite (gamma = {g})"
            ))
        })?;
        let min_pivot = gain_chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d * d)
            .fold(f64::INFINITY, f64::min);
        if !(min_pivot > 0.0) || !min_pivot.is_finite() {
            return Err(Error::Conditioning(format!("vanishing pivot {min_pivot:e}")));
        }
        let solved = gain_chol.solve(&cov_gt.transpose());
        let next_cov = linalg::symmetrize(&((&self.cov - &cov_gt * &solved) / g));
        let min_eig = linalg::min_eigenvalue(&next_cov);
        if min_eig < -linalg::PSD_TOLERANCE {
            return Err(Error::Conditioning(format!(
                "updated covariance lost positive semidefiniteness (min eigenvalue {min_eig:e})"
            )));
        }
        let innovation = residual - gamma_mat * &self.p_hat;
        let p_hat = &self.p_hat + &next_cov * (gamma_mat.transpose() * &innovation);
        Ok((
            EstimatorState {
                p_hat,
                cov: next_cov,
                gamma: g,
            },
            RlsIntermediates {
                cov_gt,
                gain_chol,
                solved,
                innovation,
                min_pivot,
            },
        ))
    }
}

/// Minimizer of the exponentially weighted least-squares objective
///
/// ```text
/// gamma^k (p - p_bar)^T P^{-1} (p - p_bar) + sum_t gamma^{k-t-1} |y_t - Gamma_t p|^2
/// ```
///
/// over a history of `k` (regressor, residual) pairs, via the normal equations.
pub fn batch_wls(
    history: &[(DMatrix<f64>, DVector<f64>)],
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    let n_p = prior_mean.len();
    check_shape(prior_cov, n_p, n_p, "prior covariance")?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("forgetting factor", format!("{gamma} not in (0, 1]")));
    }
    let prior_chol = prior_cov.clone().cholesky().ok_or_else(|| {
        Error::invalid(
            "prior covariance",
            "batch least squares needs a positive definite prior covariance; add a ridge such as 1e-10 I",
        )
    })?;
    let k = history.len();
    let prior_weight = gamma.powi(k as i32);
    let mut hessian = prior_chol.inverse() * prior_weight;
    let mut rhs = prior_chol.solve(prior_mean) * prior_weight;
    for (t, (g, y)) in history.iter().enumerate() {
        check_shape(g, y.len(), n_p, &format!("history regressor {t}"))?;
        let w = gamma.powi((k - t - 1) as i32);
        hessian += g.transpose() * g * w;
        rhs += g.transpose() * y * w;
    }
    let chol = linalg::symmetrize(&hessian)
        .cholesky()
        .ok_or_else(|| Error::Conditioning("weighted normal equations are singular".into()))?;
    Ok(chol.solve(&rhs))
}

/// Adds `ridge * I` so a singular prior covariance can be used with [`batch_wls`].
pub fn regularized(prior_cov: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    prior_cov + DMatrix::identity(prior_cov.nrows(), prior_cov.ncols()) * ridge
}

/// Default ridge for singular priors.
pub const DEFAULT_RIDGE: f64 = 1e-10;
