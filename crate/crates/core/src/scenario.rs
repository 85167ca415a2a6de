//! Frozen Monte Carlo scenarios and the coupled state / estimator rollouts
//! they induce under a policy.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{EstimatorState, RlsIntermediates};
use crate::linalg::{self, check_len, check_shape};
use crate::model::{
    scenario_stream, InitialStateDistribution, NoiseModel, ParameterPrior, ParametricAffineSystem, StreamSource,
};
use crate::policy::{DualAffinePolicy, StaticAffinePolicy};

/// Sampled initial states, parameters and noise sequences, plus the estimator
/// prior every scenario starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub seed: u64,
    pub x0: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    /// Indexed `[i][k]`.
    pub w: Vec<Vec<DVector<f64>>>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// The first `m` scenarios.
    pub fn prefix(&self, m: usize) -> ScenarioSet {
        ScenarioSet {
            seed: self.seed,
            x0: self.x0[..m].to_vec(),
            p: self.p[..m].to_vec(),
            w: self.w[..m].to_vec(),
            prior_mean: self.prior_mean.clone(),
            prior_cov: self.prior_cov.clone(),
        }
    }

    /// Every scenario with its parameter replaced by `p`.
    pub fn with_parameter(&self, p: &DVector<f64>) -> ScenarioSet {
        ScenarioSet {
            p: vec![p.clone(); self.len()],
            ..self.clone()
        }
    }

    fn check(&self, sys: &ParametricAffineSystem) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("scenario set", "no scenarios"));
        }
        check_len(&self.prior_mean, sys.n_p(), "estimator prior mean")?;
        check_shape(&self.prior_cov, sys.n_p(), sys.n_p(), "estimator prior covariance")?;
        for i in 0..self.len() {
            check_len(&self.x0[i], sys.n_x(), "scenario initial state")?;
            check_len(&self.p[i], sys.n_p(), "scenario parameter")?;
            if self.w[i].len() != sys.horizon() {
                return Err(Error::dim("scenario noise horizon", sys.horizon(), self.w[i].len()));
            }
            for w in &self.w[i] {
                check_len(w, sys.n_w(), "scenario noise")?;
            }
        }
        Ok(())
    }
}

/// Draws `m` scenarios. Scenario `i` uses its own streams, so a larger `m`
/// with the same seed extends the set without changing earlier scenarios.
pub fn draw_scenarios(
    sys: &ParametricAffineSystem,
    prior: &ParameterPrior,
    init: &InitialStateDistribution,
    noise: NoiseModel,
    m: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    if m == 0 {
        return Err(Error::invalid("scenario count", "must be at least 1"));
    }
    check_len(init.mean(), sys.n_x(), "initial state mean")?;
    check_len(prior.mean(), sys.n_p(), "prior mean")?;
    let draws: Vec<_> = (0..m)
        .into_par_iter()
        .map(|i| {
            let x0 = init.sample(&mut scenario_stream(seed, i, StreamSource::InitialState));
            let p = prior.sample(&mut scenario_stream(seed, i, StreamSource::Parameter));
            let mut rng = scenario_stream(seed, i, StreamSource::Noise);
            let w = (0..sys.horizon()).map(|_| noise.sample(&mut rng, sys.n_w())).collect();
            (x0, p, w)
        })
        .collect();
    let mut set = ScenarioSet {
        seed,
        x0: Vec::with_capacity(m),
        p: Vec::with_capacity(m),
        w: Vec::with_capacity(m),
        prior_mean: prior.mean().clone(),
        prior_cov: prior.cov().clone(),
    };
    for (x0, p, w) in draws {
        set.x0.push(x0);
        set.p.push(p);
        set.w.push(w);
    }
    Ok(set)
}

/// One scenario's closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTrajectory {
    /// `N + 1` states.
    pub x: Vec<DVector<f64>>,
    /// `N` controls.
    pub u: Vec<DVector<f64>>,
    /// `N + 1` estimates.
    pub p_hat: Vec<DVector<f64>>,
    /// `N + 1` estimator covariances.
    pub cov: Vec<DMatrix<f64>>,
}

impl ScenarioTrajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.x.last().expect("trajectory has at least one state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub scenarios: Vec<ScenarioTrajectory>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }
    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
    pub fn terminal_states(&self) -> Vec<DVector<f64>> {
        self.scenarios.iter().map(|s| s.terminal().clone()).collect()
    }
}

/// Per-step data kept for the reverse sweep.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub gamma_mat: DMatrix<f64>,
    pub rls: RlsIntermediates,
}

#[derive(Debug, Clone)]
pub(crate) struct ScenarioTrace {
    pub traj: ScenarioTrajectory,
    pub steps: Vec<StepRecord>,
    pub min_pivot: f64,
}

/// Simulates scenario `i` with the control law `control(k, x, p_hat)`.
pub(crate) fn simulate<F>(
    sys: &ParametricAffineSystem,
    scen: &ScenarioSet,
    i: usize,
    gamma: f64,
    control: F,
    record: bool,
) -> Result<ScenarioTrace>
where
    F: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let n = sys.horizon();
    let mut est = EstimatorState {
        p_hat: scen.prior_mean.clone(),
        cov: scen.prior_cov.clone(),
        gamma,
    };
    let mut traj = ScenarioTrajectory {
        x: Vec::with_capacity(n + 1),
        u: Vec::with_capacity(n),
        p_hat: Vec::with_capacity(n + 1),
        cov: Vec::with_capacity(n + 1),
    };
    let mut steps = Vec::with_capacity(if record { n } else { 0 });
    let mut min_pivot = f64::INFINITY;
    let mut x = scen.x0[i].clone();
    for k in 0..n {
        let u = control(k, &x, &est.p_hat);
        if !linalg::all_finite(u.as_slice()) {
            return Err(Error::NonFinite("control".into()).at_step(i, k));
        }
        let gamma_mat = sys.gamma_unchecked(k, &x, &u);
        let next = sys.step_with_gamma(k, &x, &u, &gamma_mat, &scen.p[i], &scen.w[i][k]);
        if !linalg::all_finite(next.as_slice()) {
            return Err(Error::NonFinite("state".into()).at_step(i, k));
        }
        let residual = &next - sys.known_unchecked(k, &x, &u);
        let (next_est, rls) = est.update_detailed(&gamma_mat, &residual).map_err(|e| e.at_step(i, k))?;
        if !linalg::all_finite(next_est.p_hat.as_slice()) {
            return Err(Error::NonFinite("parameter estimate".into()).at_step(i, k));
        }
        min_pivot = min_pivot.min(rls.min_pivot);
        traj.x.push(std::mem::replace(&mut x, next));
        traj.u.push(u);
        traj.p_hat.push(std::mem::replace(&mut est.p_hat, next_est.p_hat));
        traj.cov.push(std::mem::replace(&mut est.cov, next_est.cov));
        if record {
            steps.push(StepRecord { gamma_mat, rls });
        }
    }
    traj.x.push(x);
    traj.p_hat.push(est.p_hat);
    traj.cov.push(est.cov);
    Ok(ScenarioTrace {
        traj,
        steps,
        min_pivot,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("forgetting factor", format!("{gamma} not in (0, 1]")));
    }
    Ok(())
}

fn check_policy_dims(sys: &ParametricAffineSystem, pol: &DualAffinePolicy) -> Result<()> {
    if pol.horizon() != sys.horizon() {
        return Err(Error::dim("policy horizon", sys.horizon(), pol.horizon()));
    }
    if pol.n_p() != sys.n_p() {
        return Err(Error::dim("policy parameter blocks", sys.n_p(), pol.n_p()));
    }
    for k in 0..pol.horizon() {
        for j in 0..=pol.n_p() {
            check_len(&pol.feedforward[k][j], sys.n_u(), "policy feedforward")?;
            check_shape(&pol.feedback[k][j], sys.n_u(), sys.n_x(), "policy feedback")?;
        }
    }
    Ok(())
}

/// Closed-loop rollout of the estimate-scheduled policy with the recursive
/// estimator in the loop.
pub fn rollout_dual(
    sys: &ParametricAffineSystem,
    pol: &DualAffinePolicy,
    scen: &ScenarioSet,
    gamma: f64,
) -> Result<TrajectoryBatch> {
    check_gamma(gamma)?;
    check_policy_dims(sys, pol)?;
    scen.check(sys)?;
    let scenarios = (0..scen.len())
        .into_par_iter()
        .map(|i| simulate(sys, scen, i, gamma, |k, x, p| pol.eval_unchecked(k, x, p), false).map(|t| t.traj))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch { scenarios })
}

/// Closed-loop rollout of a static policy; the estimator still runs for
/// diagnostics but does not affect the control.
pub fn rollout_static(
    sys: &ParametricAffineSystem,
    pol: &StaticAffinePolicy,
    scen: &ScenarioSet,
    gamma: f64,
) -> Result<TrajectoryBatch> {
    check_gamma(gamma)?;
    if pol.horizon() != sys.horizon() {
        return Err(Error::dim("policy horizon", sys.horizon(), pol.horizon()));
    }
    for k in 0..pol.horizon() {
        check_len(&pol.feedforward[k], sys.n_u(), "policy feedforward")?;
        check_shape(&pol.feedback[k], sys.n_u(), sys.n_x(), "policy feedback")?;
    }
    scen.check(sys)?;
    let scenarios = (0..scen.len())
        .into_par_iter()
        .map(|i| {
            simulate(
                sys,
                scen,
                i,
                gamma,
                |k, x, _| &pol.feedforward[k] + &pol.feedback[k] * x,
                false,
            )
            .map(|t| t.traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch { scenarios })
}

/// How the summed stage cost is scaled across scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostScaling {
    /// Divide by the number of scenarios.
    #[default]
    Mean,
    /// Plain sum over scenarios.
    Sum,
}

/// Quadratic stage cost `x^T Q_k x + u^T R_k u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub scaling: CostScaling,
}

impl StageCost {
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if q.len() != r.len() || q.is_empty() {
            return Err(Error::invalid("stage cost", "Q and R schedules must be nonempty and equally long"));
        }
        for (k, (qk, rk)) in q.iter().zip(&r).enumerate() {
            linalg::require_psd(qk, &format!("Q[{k}]"))?;
            linalg::require_pd(rk, &format!("R[{k}]"))?;
        }
        Ok(Self {
            q,
            r,
            scaling: CostScaling::Mean,
        })
    }

    pub fn time_invariant(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![q; horizon], vec![r; horizon])
    }

    pub fn with_scaling(mut self, scaling: CostScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub(crate) fn scenario_weight(&self, m: usize) -> f64 {
        match self.scaling {
            CostScaling::Mean => 1.0 / m as f64,
            CostScaling::Sum => 1.0,
        }
    }

    /// Unscaled cost of a single trajectory.
    pub fn trajectory_cost(&self, traj: &ScenarioTrajectory) -> f64 {
        traj.u
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let x = &traj.x[k];
                x.dot(&(&self.q[k] * x)) + u.dot(&(&self.r[k] * u))
            })
            .sum()
    }
}

/// Sample-average stage cost of a batch.
pub fn saa_cost(traj: &TrajectoryBatch, cost: &StageCost) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::invalid("trajectory batch", "no scenarios"));
    }
    let per: Vec<f64> = traj
        .scenarios
        .iter()
        .map(|s| {
            if s.u.len() != cost.horizon() {
                return Err(Error::dim("stage cost horizon", s.u.len(), cost.horizon()));
            }
            Ok(cost.trajectory_cost(s))
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() * cost.scenario_weight(traj.len()))
}

/// Empirical second moment of terminal states about `mu_f`.
pub fn terminal_second_moment(terminal: &[DVector<f64>], mu_f: &DVector<f64>) -> DMatrix<f64> {
    let n = mu_f.len();
    let mut acc = DMatrix::zeros(n, n);
    for x in terminal {
        let d = x - mu_f;
        acc += &d * d.transpose();
    }
    acc / terminal.len() as f64
}

pub fn terminal_mean(terminal: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(terminal[0].len());
    for x in terminal {
        acc += x;
    }
    acc / terminal.len() as f64
}

/// Absolute terminal mean and covariance residuals, the latter flattened
/// row-major with the slack `V V^T` added.
pub fn terminal_residuals(
    traj: &TrajectoryBatch,
    slack: &DMatrix<f64>,
    mu_f: &DVector<f64>,
    sigma_f: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if traj.is_empty() {
        return Err(Error::invalid("trajectory batch", "no scenarios"));
    }
    let n = mu_f.len();
    check_shape(sigma_f, n, n, "terminal covariance")?;
    check_shape(slack, n, n, "slack")?;
    let terminal = traj.terminal_states();
    for x in &terminal {
        check_len(x, n, "terminal state")?;
    }
    let mean = (terminal_mean(&terminal) - mu_f).abs();
    let cov = terminal_second_moment(&terminal, mu_f) + slack * slack.transpose() - sigma_f;
    Ok((mean, linalg::vec_row_major(&cov).abs()))
}

/// Writes a plot-ready CSV: one row per (scenario, step) with states,
/// controls (empty at the final step), estimates and the estimator
/// covariance diagonal.
pub fn write_trajectory_csv(path: &Path, traj: &TrajectoryBatch, scenarios: &[usize]) -> Result<()> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut out = csv::Writer::from_path(path).map_err(wrap)?;
    let Some(first) = traj.scenarios.first() else {
        return out.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        });
    };
    let (n_x, n_u, n_p) = (first.x[0].len(), first.u.first().map_or(0, |u| u.len()), first.p_hat[0].len());
    let mut header = vec!["scenario".to_string(), "k".to_string()];
    header.extend((0..n_x).map(|a| format!("x{a}")));
    header.extend((0..n_u).map(|a| format!("u{a}")));
    header.extend((0..n_p).map(|a| format!("p_hat{a}")));
    header.extend((0..n_p).map(|a| format!("p_cov{a}{a}")));
    out.write_record(&header).map_err(wrap)?;
    for &i in scenarios {
        let s = traj
            .scenarios
            .get(i)
            .ok_or_else(|| Error::invalid("trajectory export", format!("no scenario {i}")))?;
        for k in 0..s.x.len() {
            let mut row = vec![i.to_string(), k.to_string()];
            row.extend(s.x[k].iter().map(|v| fmt_f64(*v)));
            match s.u.get(k) {
                Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                None => row.extend((0..n_u).map(|_| String::new())),
            }
            row.extend(s.p_hat[k].iter().map(|v| fmt_f64(*v)));
            row.extend(s.cov[k].diagonal().iter().map(|v| fmt_f64(*v)));
            out.write_record(&row).map_err(wrap)?;
        }
    }
    out.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Shortest decimal that round-trips to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::batch_wls;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_system(rng: &mut ChaCha8Rng, horizon: usize, with_noise: bool) -> ParametricAffineSystem {
        let mut m = |r, c, s: f64| DMatrix::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0));
        let a = vec![DMatrix::identity(2, 2) * 0.9 + m(2, 2, 0.1), m(2, 2, 0.2)];
        let b = vec![m(2, 1, 0.5), m(2, 1, 1.0)];
        let r = vec![m(2, 1, 0.1).column(0).into_owned(), m(2, 1, 0.1).column(0).into_owned()];
        let d = if with_noise { m(2, 2, 0.1) } else { DMatrix::zeros(2, 2) };
        ParametricAffineSystem::time_invariant(horizon, a, b, r, d).unwrap()
    }

    fn random_dual(rng: &mut ChaCha8Rng, horizon: usize) -> DualAffinePolicy {
        let mut pol = DualAffinePolicy::zeros(horizon, 2, 1, 1);
        for k in 0..horizon {
            for j in 0..2 {
                pol.feedforward[k][j] = DVector::from_fn(1, |_, _| rng.gen_range(-0.5..0.5));
                pol.feedback[k][j] = DMatrix::from_fn(1, 2, |_, _| rng.gen_range(-0.3..0.3));
            }
        }
        pol
    }

    fn setup(seed: u64, horizon: usize, noise: bool, m: usize) -> (ParametricAffineSystem, ScenarioSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = small_system(&mut rng, horizon, noise);
        let prior = ParameterPrior::new(crate::model::PriorFamily::Uniform {
            lower: DVector::from_element(1, 0.5),
            upper: DVector::from_element(1, 1.5),
        })
        .unwrap();
        let init = InitialStateDistribution::gaussian(DVector::from_vec(vec![1.0, -1.0]), DMatrix::identity(2, 2) * 0.1).unwrap();
        let scen = draw_scenarios(&sys, &prior, &init, NoiseModel::Gaussian, m, seed).unwrap();
        (sys, scen)
    }

    #[test]
    fn draws_are_deterministic_and_prefix_stable() {
        let (sys, a) = setup(3, 5, true, 100);
        let (_, b) = setup(3, 5, true, 100);
        assert_eq!(a, b);
        let (_, small) = setup(3, 5, true, 10);
        assert_eq!(small, a.prefix(10));
        assert_eq!(a.w[0].len(), sys.horizon());
    }

    #[test]
    fn parameter_sample_mean_matches_prior() {
        let (_, scen) = setup(4, 1, false, 100_000);
        let mean: f64 = scen.p.iter().map(|p| p[0]).sum::<f64>() / scen.len() as f64;
        let sd = (1.0f64 / 12.0).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * sd / (scen.len() as f64).sqrt());
    }

    #[test]
    fn point_mass_noise_free_rollout_is_iterated_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = small_system(&mut rng, 6, false);
        let pol = random_dual(&mut rng, 6);
        let prior = ParameterPrior::point_mass(DVector::from_element(1, 1.2)).unwrap();
        let init = InitialStateDistribution::gaussian(DVector::from_vec(vec![0.3, 0.4]), DMatrix::zeros(2, 2)).unwrap();
        let scen = draw_scenarios(&sys, &prior, &init, NoiseModel::Gaussian, 1, 1).unwrap();
        let traj = rollout_dual(&sys, &pol, &scen, 1.0).unwrap();
        let s = &traj.scenarios[0];
        let mut x = DVector::from_vec(vec![0.3, 0.4]);
        for k in 0..6 {
            assert_eq!(s.p_hat[k][0], 1.2);
            let u = pol.eval(k, &x, &DVector::from_element(1, 1.2)).unwrap();
            x = sys.step(k, &x, &u, &DVector::from_element(1, 1.2), &DVector::zeros(2)).unwrap();
            assert!((&s.x[k + 1] - &x).amax() < 1e-14);
        }
        assert_eq!(s.p_hat[6][0], 1.2);
    }

    #[test]
    fn recorded_estimates_equal_batch_solution() {
        for &gamma in &[1.0, 0.9] {
            let (sys, scen) = setup(6, 12, true, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(60);
            let pol = random_dual(&mut rng, 12);
            let traj = rollout_dual(&sys, &pol, &scen, gamma).unwrap();
            for s in &traj.scenarios {
                let mut history = Vec::new();
                for k in 0..12 {
                    let g = sys.assemble_gamma(k, &s.x[k], &s.u[k]).unwrap();
                    let y = &s.x[k + 1] - sys.known_part(k, &s.x[k], &s.u[k]).unwrap();
                    history.push((g, y));
                    let batch = batch_wls(&history, &scen.prior_mean, &scen.prior_cov, gamma).unwrap();
                    let rel = (&batch - &s.p_hat[k + 1]).amax() / batch.amax().max(1.0);
                    assert!(rel < 1e-8, "gamma {gamma} step {k}: {rel}");
                }
            }
        }
    }

    #[test]
    fn embedded_static_rollout_matches_static_rollout() {
        let (sys, scen) = setup(7, 8, true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let stat = random_dual(&mut rng, 8).nominal_part();
        let a = rollout_static(&sys, &stat, &scen, 1.0).unwrap();
        let b = rollout_dual(&sys, &stat.embed_as_dual(1), &scen, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equilibrium_rollout_is_zero() {
        let a = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5];
        let b = vec![DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(2, 1, 1.0)];
        let r = vec![DVector::zeros(2), DVector::zeros(2)];
        let sys = ParametricAffineSystem::time_invariant(4, a, b, r, DMatrix::zeros(2, 1)).unwrap();
        let prior = ParameterPrior::new(crate::model::PriorFamily::Uniform {
            lower: DVector::from_element(1, 0.5),
            upper: DVector::from_element(1, 1.5),
        })
        .unwrap();
        let init = InitialStateDistribution::gaussian(DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        let scen = draw_scenarios(&sys, &prior, &init, NoiseModel::Gaussian, 3, 9).unwrap();
        let traj = rollout_static(&sys, &StaticAffinePolicy::zeros(4, 2, 1), &scen, 1.0).unwrap();
        for s in &traj.scenarios {
            assert!(s.x.iter().all(|x| x.amax() == 0.0));
            assert!(s.u.iter().all(|u| u.amax() == 0.0));
        }
        let cost = StageCost::time_invariant(4, DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(saa_cost(&traj, &cost).unwrap(), 0.0);
    }

    #[test]
    fn cost_hand_example() {
        let traj = TrajectoryBatch {
            scenarios: vec![ScenarioTrajectory {
                x: vec![DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::zeros(3)],
                u: vec![DVector::from_element(1, 2.0)],
                p_hat: vec![DVector::zeros(1); 2],
                cov: vec![DMatrix::zeros(1, 1); 2],
            }],
        };
        let cost = StageCost::time_invariant(1, DMatrix::identity(3, 3), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(saa_cost(&traj, &cost).unwrap(), 5.0);
        let doubled = TrajectoryBatch {
            scenarios: vec![traj.scenarios[0].clone(), traj.scenarios[0].clone()],
        };
        assert_eq!(saa_cost(&doubled, &cost).unwrap(), 5.0);
        assert_eq!(saa_cost(&doubled, &cost.clone().with_scaling(CostScaling::Sum)).unwrap(), 10.0);
    }

    #[test]
    fn indefinite_r_rejected() {
        assert!(StageCost::time_invariant(2, DMatrix::identity(2, 2), DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn exact_slack_fill_gives_zero_residuals() {
        let mu = DVector::from_vec(vec![0.5, -0.2]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let s = ScenarioTrajectory {
            x: vec![mu.clone()],
            u: vec![],
            p_hat: vec![DVector::zeros(1)],
            cov: vec![DMatrix::zeros(1, 1)],
        };
        let traj = TrajectoryBatch {
            scenarios: vec![s.clone(), s],
        };
        let root = linalg::psd_sqrt(&sigma);
        let (m, c) = terminal_residuals(&traj, &root, &mu, &sigma).unwrap();
        assert_eq!(m.amax(), 0.0);
        assert!(c.amax() < 1e-16);
        let (_, c0) = terminal_residuals(&traj, &DMatrix::zeros(2, 2), &mu, &sigma).unwrap();
        assert_eq!(c0, linalg::vec_row_major(&sigma));
    }

    #[test]
    fn residuals_match_direct_recomputation() {
        let (sys, scen) = setup(8, 6, true, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let pol = random_dual(&mut rng, 6);
        let traj = rollout_dual(&sys, &pol, &scen, 1.0).unwrap();
        let v = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.5..0.5));
        let mu = DVector::from_vec(vec![0.1, 0.2]);
        let sigma = DMatrix::identity(2, 2) * 0.3;
        let (m, c) = terminal_residuals(&traj, &v, &mu, &sigma).unwrap();
        // Scalar loops over raw trajectories.
        let n = traj.len() as f64;
        for a in 0..2 {
            let mean_a: f64 = traj.scenarios.iter().map(|s| s.x[6][a]).sum::<f64>() / n;
            assert!((m[a] - (mean_a - mu[a]).abs()).abs() < 1e-14);
            for b in 0..2 {
                let second: f64 = traj
                    .scenarios
                    .iter()
                    .map(|s| (s.x[6][a] - mu[a]) * (s.x[6][b] - mu[b]))
                    .sum::<f64>()
                    / n;
                let vv: f64 = (0..2).map(|c| v[(a, c)] * v[(b, c)]).sum();
                assert!((c[a * 2 + b] - (second + vv - sigma[(a, b)]).abs()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn covariance_nonincreasing_at_unit_forgetting() {
        let (sys, scen) = setup(9, 15, true, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let pol = random_dual(&mut rng, 15);
        let traj = rollout_dual(&sys, &pol, &scen, 1.0).unwrap();
        for s in &traj.scenarios {
            for k in 0..15 {
                assert!(linalg::max_eigenvalue(&(&s.cov[k + 1] - &s.cov[k])) <= 1e-10);
            }
        }
    }

    #[test]
    fn replay_is_bit_exact_and_cost_permutation_invariant() {
        let (sys, scen) = setup(10, 6, true, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let pol = random_dual(&mut rng, 6);
        let a = rollout_dual(&sys, &pol, &scen, 0.95).unwrap();
        let b = rollout_dual(&sys, &pol, &scen, 0.95).unwrap();
        assert_eq!(a, b);
        let cost = StageCost::time_invariant(6, DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap();
        let mut rev = a.clone();
        rev.scenarios.reverse();
        let (ca, cr) = (saa_cost(&a, &cost).unwrap(), saa_cost(&rev, &cost).unwrap());
        assert!((ca - cr).abs() <= 1e-12 * ca.abs());
    }

    #[test]
    fn trajectory_csv_has_expected_shape() {
        let (sys, scen) = setup(11, 3, true, 2);
        let traj = rollout_static(&sys, &StaticAffinePolicy::zeros(3, 2, 1), &scen, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &traj, &[0, 1]).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rdr.headers().unwrap().len(), 2 + 2 + 1 + 1 + 1);
        assert_eq!(rdr.records().count(), 2 * 4);
    }
}
