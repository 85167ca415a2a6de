//! Parametric affine time-varying systems and the distributions that drive
//! them.
//!
//! The dynamics are
//!
//! ```text
//! x[k+1] = sum_{j=0..n_p} (A[k][j] x + B[k][j] u + r[k][j]) p^j + D[k] w
//! ```
//!
//! where `p^0 = 1` is a constant pseudo-parameter carrying the known,
//! parameter-independent part of the model and `p^1..p^n_p` are unknown.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len, check_shape};

/// Affine system whose blocks are weighted by an unknown parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricAffineSystem {
    n_x: usize,
    n_u: usize,
    n_p: usize,
    n_w: usize,
    /// Indexed `[k][j]` with `j = 0` the known block.
    a: Vec<Vec<DMatrix<f64>>>,
    b: Vec<Vec<DMatrix<f64>>>,
    r: Vec<Vec<DVector<f64>>>,
    d: Vec<DMatrix<f64>>,
}

impl ParametricAffineSystem {
    /// Builds a system from per-step blocks. `a[k]`, `b[k]`, `r[k]` must each
    /// hold `n_p + 1` entries, the first being the known block.
    pub fn new(
        a: Vec<Vec<DMatrix<f64>>>,
        b: Vec<Vec<DMatrix<f64>>>,
        r: Vec<Vec<DVector<f64>>>,
        d: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::invalid("system", "horizon must be at least 1"));
        }
        let blocks = a[0].len();
        if blocks == 0 {
            return Err(Error::invalid("system", "missing known (j = 0) block"));
        }
        let n_p = blocks - 1;
        let n_x = a[0][0].nrows();
        let n_u = b.first().and_then(|bk| bk.first()).map_or(0, |m| m.ncols());
        let n_w = d.first().map_or(0, |m| m.ncols());
        if n_x == 0 || n_u == 0 || n_w == 0 {
            return Err(Error::invalid("system", "all dimensions must be positive"));
        }
        for (name, len) in [("B", b.len()), ("r", r.len()), ("D", d.len())] {
            if len != horizon {
                return Err(Error::dim(format!("system {name} horizon"), horizon, len));
            }
        }
        for k in 0..horizon {
            for (name, len) in [("A", a[k].len()), ("B", b[k].len()), ("r", r[k].len())] {
                if len != blocks {
                    return Err(Error::dim(format!("system {name}[{k}] blocks"), blocks, len));
                }
            }
            for j in 0..blocks {
                check_shape(&a[k][j], n_x, n_x, &format!("A[{k}][{j}]"))?;
                check_shape(&b[k][j], n_x, n_u, &format!("B[{k}][{j}]"))?;
                check_len(&r[k][j], n_x, &format!("r[{k}][{j}]"))?;
                let finite = linalg::all_finite(a[k][j].as_slice())
                    && linalg::all_finite(b[k][j].as_slice())
                    && linalg::all_finite(r[k][j].as_slice());
                if !finite {
                    return Err(Error::NonFinite(format!("system block ({k}, {j})")));
                }
            }
            check_shape(&d[k], n_x, n_w, &format!("D[{k}]"))?;
            if !linalg::all_finite(d[k].as_slice()) {
                return Err(Error::NonFinite(format!("D[{k}]")));
            }
        }
        Ok(Self {
            n_x,
            n_u,
            n_p,
            n_w,
            a,
            b,
            r,
            d,
        })
    }

    /// Replicates one set of blocks across `horizon` steps.
    pub fn time_invariant(
        horizon: usize,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        r: Vec<DVector<f64>>,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(
            vec![a; horizon],
            vec![b; horizon],
            vec![r; horizon],
            vec![d; horizon],
        )
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_p(&self) -> usize {
        self.n_p
    }
    pub fn n_w(&self) -> usize {
        self.n_w
    }
    pub fn a(&self, k: usize, j: usize) -> &DMatrix<f64> {
        &self.a[k][j]
    }
    pub fn b(&self, k: usize, j: usize) -> &DMatrix<f64> {
        &self.b[k][j]
    }
    pub fn r(&self, k: usize, j: usize) -> &DVector<f64> {
        &self.r[k][j]
    }
    pub fn d(&self, k: usize) -> &DMatrix<f64> {
        &self.d[k]
    }

    fn check_args(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if k >= self.horizon() {
            return Err(Error::invalid(
                "step index",
                format!("{k} outside horizon {}", self.horizon()),
            ));
        }
        check_len(x, self.n_x, "state")?;
        check_len(u, self.n_u, "control")
    }

    fn block_term(&self, k: usize, j: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a[k][j] * x + &self.b[k][j] * u + &self.r[k][j]
    }

    /// Regressor `Gamma_k(x, u)`: column `j - 1` is `A[k][j] x + B[k][j] u + r[k][j]`
    /// for the unknown parameters `j = 1..n_p`.
    pub fn assemble_gamma(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_args(k, x, u)?;
        Ok(self.gamma_unchecked(k, x, u))
    }

    pub(crate) fn gamma_unchecked(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n_x, self.n_p);
        for j in 1..=self.n_p {
            g.set_column(j - 1, &self.block_term(k, j, x, u));
        }
        g
    }

    /// Parameter-independent part `A[k][0] x + B[k][0] u + r[k][0]`.
    pub fn known_part(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_args(k, x, u)?;
        Ok(self.block_term(k, 0, x, u))
    }

    pub(crate) fn known_unchecked(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.block_term(k, 0, x, u)
    }

    /// One step of the dynamics.
    pub fn step(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_args(k, x, u)?;
        check_len(p, self.n_p, "parameter")?;
        check_len(w, self.n_w, "noise")?;
        for (name, v) in [("state", x), ("control", u), ("parameter", p), ("noise", w)] {
            if !linalg::all_finite(v.as_slice()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        let gamma = self.gamma_unchecked(k, x, u);
        Ok(self.step_with_gamma(k, x, u, &gamma, p, w))
    }

    pub(crate) fn step_with_gamma(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        gamma: &DMatrix<f64>,
        p: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.known_unchecked(k, x, u) + gamma * p + &self.d[k] * w
    }
}

/// Distribution family of the unknown parameter vector, described by its
/// natural shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorFamily {
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    /// Independent components, each uniform on `[lower, upper]`.
    Uniform {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// Independent components, each `Beta(alpha, beta)` rescaled to `[lower, upper]`.
    Beta {
        alpha: DVector<f64>,
        beta: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct ParameterPrior {
    family: PriorFamily,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Symmetric square roots used by the Gaussian samplers.
    roots: Vec<DMatrix<f64>>,
    samplers: Vec<Beta<f64>>,
}

impl ParameterPrior {
    pub fn new(family: PriorFamily) -> Result<Self> {
        let mut roots = Vec::new();
        let mut samplers = Vec::new();
        let (mean, cov) = match &family {
            PriorFamily::Gaussian { mean, cov } => {
                check_shape(cov, mean.len(), mean.len(), "gaussian prior covariance")?;
                linalg::require_psd(cov, "gaussian prior covariance")?;
                roots.push(linalg::psd_sqrt(cov));
                (mean.clone(), linalg::symmetrize(cov))
            }
            PriorFamily::Uniform { lower, upper } => {
                check_len(upper, lower.len(), "uniform prior bounds")?;
                if lower.iter().zip(upper.iter()).any(|(a, b)| !(a <= b)) {
                    return Err(Error::invalid("uniform prior", "lower bound exceeds upper bound"));
                }
                let mean = (lower + upper) * 0.5;
                let var = (upper - lower).map(|w| w * w / 12.0);
                (mean, DMatrix::from_diagonal(&var))
            }
            PriorFamily::Beta {
                alpha,
                beta,
                lower,
                upper,
            } => {
                let n = alpha.len();
                check_len(beta, n, "beta prior shape")?;
                check_len(lower, n, "beta prior bounds")?;
                check_len(upper, n, "beta prior bounds")?;
                let mut mean = DVector::zeros(n);
                let mut var = DVector::zeros(n);
                for i in 0..n {
                    let (a, b) = (alpha[i], beta[i]);
                    if !(lower[i] <= upper[i]) {
                        return Err(Error::invalid("beta prior", "lower bound exceeds upper bound"));
                    }
                    samplers.push(Beta::new(a, b).map_err(|e| Error::invalid("beta prior", e.to_string()))?);
                    let width = upper[i] - lower[i];
                    let s = a + b;
                    mean[i] = lower[i] + width * a / s;
                    var[i] = width * width * a * b / (s * s * (s + 1.0));
                }
                (mean, DMatrix::from_diagonal(&var))
            }
            PriorFamily::GaussianMixture {
                weights,
                means,
                covs,
            } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
                    return Err(Error::invalid(
                        "gaussian mixture prior",
                        "weights, means and covariances must have equal nonzero length",
                    ));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "gaussian mixture prior",
                        "weights must be nonnegative and sum to one",
                    ));
                }
                let n = means[0].len();
                let mut mean = DVector::zeros(n);
                let mut second = DMatrix::zeros(n, n);
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    check_len(m, n, "mixture component mean")?;
                    check_shape(c, n, n, "mixture component covariance")?;
                    linalg::require_psd(c, "mixture component covariance")?;
                    roots.push(linalg::psd_sqrt(c));
                    mean += m * *w;
                    second += (c + m * m.transpose()) * *w;
                }
                let cov = linalg::symmetrize(&(second - &mean * mean.transpose()));
                (mean, cov)
            }
        };
        if mean.is_empty() {
            return Err(Error::invalid("prior", "parameter dimension must be positive"));
        }
        if !linalg::all_finite(mean.as_slice()) || !linalg::all_finite(cov.as_slice()) {
            return Err(Error::NonFinite("prior moments".into()));
        }
        Ok(Self {
            family,
            mean,
            cov,
            roots,
            samplers,
        })
    }

    /// Zero-variance prior concentrated at `value`.
    pub fn point_mass(value: DVector<f64>) -> Result<Self> {
        let n = value.len();
        Self::new(PriorFamily::Gaussian {
            mean: value,
            cov: DMatrix::zeros(n, n),
        })
    }

    pub fn family(&self) -> &PriorFamily {
        &self.family
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        match &self.family {
            PriorFamily::Gaussian { mean, .. } => mean + &self.roots[0] * standard_normal(rng, n),
            PriorFamily::Uniform { lower, upper } => {
                DVector::from_fn(n, |i, _| lower[i] + (upper[i] - lower[i]) * rng.gen::<f64>())
            }
            PriorFamily::Beta { lower, upper, .. } => DVector::from_fn(n, |i, _| {
                lower[i] + (upper[i] - lower[i]) * self.samplers[i].sample(rng)
            }),
            PriorFamily::GaussianMixture { weights, means, .. } => {
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (c, w) in weights.iter().enumerate() {
                    acc += w;
                    if draw < acc {
                        pick = c;
                        break;
                    }
                }
                &means[pick] + &self.roots[pick] * standard_normal(rng, n)
            }
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Gaussian initial-state distribution.
#[derive(Debug, Clone)]
pub struct InitialStateDistribution {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl InitialStateDistribution {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_shape(&cov, mean.len(), mean.len(), "initial state covariance")?;
        linalg::require_psd(&cov, "initial state covariance")?;
        let root = linalg::psd_sqrt(&cov);
        Ok(Self { mean, cov, root })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + &self.root * standard_normal(rng, self.mean.len())
    }
}

/// Zero-mean, identity-covariance disturbance; independent across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseModel {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3), sqrt(3)]` per component.
    UniformScaled,
}

impl NoiseModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_w: usize) -> DVector<f64> {
        match self {
            NoiseModel::Gaussian => standard_normal(rng, n_w),
            NoiseModel::UniformScaled => {
                let half = 3f64.sqrt();
                DVector::from_fn(n_w, |_, _| rng.gen_range(-half..half))
            }
        }
    }
}

/// Random source feeding one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSource {
    InitialState = 0,
    Parameter = 1,
    Noise = 2,
}

/// Independent random stream for `(scenario, source)` under a master seed.
/// Scenario `i` draws the same values no matter how many scenarios exist.
pub fn scenario_stream(seed: u64, scenario: usize, source: StreamSource) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scenario as u64 * 3 + source as u64);
    rng
}
