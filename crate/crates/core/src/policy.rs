//! Feedback policy classes: static affine state feedback and the
//! estimate-scheduled affine policy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_len, check_shape};

/// `u_k = v_k + L_k x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticAffinePolicy {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

impl StaticAffinePolicy {
    pub fn new(feedforward: Vec<DVector<f64>>, feedback: Vec<DMatrix<f64>>) -> Result<Self> {
        if feedforward.is_empty() || feedforward.len() != feedback.len() {
            return Err(Error::invalid("static policy", "gain schedules must be nonempty and equally long"));
        }
        let n_u = feedforward[0].len();
        let n_x = feedback[0].ncols();
        for k in 0..feedforward.len() {
            check_len(&feedforward[k], n_u, &format!("v[{k}]"))?;
            check_shape(&feedback[k], n_u, n_x, &format!("L[{k}]"))?;
        }
        Ok(Self {
            feedforward,
            feedback,
        })
    }

    pub fn zeros(horizon: usize, n_x: usize, n_u: usize) -> Self {
        Self {
            feedforward: vec![DVector::zeros(n_u); horizon],
            feedback: vec![DMatrix::zeros(n_u, n_x); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.feedforward.len()
    }

    pub fn eval(&self, k: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if k >= self.horizon() {
            return Err(Error::invalid("step index", format!("{k} outside policy horizon")));
        }
        check_len(x, self.feedback[k].ncols(), "state")?;
        Ok(&self.feedforward[k] + &self.feedback[k] * x)
    }

    /// The same law as an estimate-scheduled policy with zero adaptive blocks.
    pub fn embed_as_dual(&self, n_p: usize) -> DualAffinePolicy {
        let n_u = self.feedforward[0].len();
        let n_x = self.feedback[0].ncols();
        let mut dual = DualAffinePolicy::zeros(self.horizon(), n_x, n_u, n_p);
        for k in 0..self.horizon() {
            dual.feedforward[k][0] = self.feedforward[k].clone();
            dual.feedback[k][0] = self.feedback[k].clone();
        }
        dual
    }
}

/// `u_k = v_k^0 + L_k^0 x_k + sum_j (v_k^j + L_k^j x_k) p_hat_k^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAffinePolicy {
    /// Indexed `[k][j]`, `j = 0..=n_p`.
    pub feedforward: Vec<Vec<DVector<f64>>>,
    pub feedback: Vec<Vec<DMatrix<f64>>>,
}

impl DualAffinePolicy {
    pub fn zeros(horizon: usize, n_x: usize, n_u: usize, n_p: usize) -> Self {
        Self {
            feedforward: vec![vec![DVector::zeros(n_u); n_p + 1]; horizon],
            feedback: vec![vec![DMatrix::zeros(n_u, n_x); n_p + 1]; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.feedforward.len()
    }
    pub fn n_p(&self) -> usize {
        self.feedforward[0].len() - 1
    }
    pub fn n_u(&self) -> usize {
        self.feedforward[0][0].len()
    }
    pub fn n_x(&self) -> usize {
        self.feedback[0][0].ncols()
    }

    pub fn eval(&self, k: usize, x: &DVector<f64>, p_hat: &DVector<f64>) -> Result<DVector<f64>> {
        if k >= self.horizon() {
            return Err(Error::invalid("step index", format!("{k} outside policy horizon")));
        }
        check_len(x, self.n_x(), "state")?;
        check_len(p_hat, self.n_p(), "parameter estimate")?;
        Ok(self.eval_unchecked(k, x, p_hat))
    }

    pub(crate) fn eval_unchecked(&self, k: usize, x: &DVector<f64>, p_hat: &DVector<f64>) -> DVector<f64> {
        let v = &self.feedforward[k];
        let l = &self.feedback[k];
        let mut u = &v[0] + &l[0] * x;
        for j in 1..v.len() {
            let c = p_hat[j - 1];
            u += (&v[j] + &l[j] * x) * c;
        }
        u
    }

    /// The policy with every adaptive block (`j >= 1`) set to zero.
    pub fn nominal_part(&self) -> StaticAffinePolicy {
        StaticAffinePolicy {
            feedforward: self.feedforward.iter().map(|v| v[0].clone()).collect(),
            feedback: self.feedback.iter().map(|l| l[0].clone()).collect(),
        }
    }

    pub fn is_static(&self) -> bool {
        self.feedforward.iter().all(|v| v[1..].iter().all(|b| b.iter().all(|&e| e == 0.0)))
            && self.feedback.iter().all(|l| l[1..].iter().all(|b| b.iter().all(|&e| e == 0.0)))
    }
}

/// Free-function form of [`StaticAffinePolicy::embed_as_dual`].
pub fn embed_static_as_dual(policy: &StaticAffinePolicy, n_p: usize) -> DualAffinePolicy {
    policy.embed_as_dual(n_p)
}
