//! Experiment orchestration: configuration, the shared-scenario comparison of
//! steering formulations, out-of-sample evaluation and result files.
//!
//! Output files written by [`emit_outputs`]:
//!
//! * `summary.json`: per formulation `status`, `cost_mean`, `cost_norm`,
//!   `term_mean_err`, `term_cov` and `satisfied`; keys sorted, no timings,
//!   so identical configs give identical bytes.
//! * `diagnostics.json`: solver statistics and wall-clock times.
//! * `trials.csv`: one row per formulation and evaluation trial.
//! * `trajectories_<tag>.csv`: full trajectories of the first trials.
//! * `policy_<tag>.json`: solved gains and slack in the canonical layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, matrix_to_rows, rows_to_matrix};
use crate::model::{InitialStateDistribution, NoiseModel, ParameterPrior, ParametricAffineSystem, PriorFamily};
use crate::policy::DualAffinePolicy;
use crate::saa_nlp::{DecisionLayout, Formulation, TerminalTarget};
use crate::scenario::{self, draw_scenarios, fmt_f64, ScenarioSet, StageCost, TrajectoryBatch};
use crate::solver::{write_iteration_log, SolverOptions, SolverResult, SolverStatus, WarmStart};
use crate::steering::{solve_formulation, Solution, SteeringSpec};
use crate::vehicle::{self, VehicleParams};

/// Formulation names used in configs, on the command line and in output
/// file names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulationTag {
    Ce,
    Robust,
    Dual,
    Fullinfo,
}

impl FormulationTag {
    pub const ALL: [FormulationTag; 4] = [Self::Ce, Self::Robust, Self::Dual, Self::Fullinfo];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Robust => "robust",
            Self::Dual => "dual",
            Self::Fullinfo => "fullinfo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown formulation '{s}' (expected ce, robust, dual or fullinfo)")))
    }
}

/// The dynamics, initial state, stage cost and terminal target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SystemConfig {
    /// Lateral vehicle benchmark; the target covariance is
    /// `diag(0.01, sigma_f_theta, sigma_f_theta)`.
    Vehicle(VehicleParams),
    Raw(RawSystem),
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Vehicle(VehicleParams::default())
    }
}

/// A time-invariant system given by its matrices. `a`, `b` and `r` hold
/// `n_p + 1` blocks each, the first being the parameter-free part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    pub horizon: usize,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Vec<Vec<f64>>,
    pub state_weight: Vec<Vec<f64>>,
    pub control_weight: Vec<Vec<f64>>,
    pub target_mean: Vec<f64>,
    pub target_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Beta {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Uniform {
            lower: vec![0.7],
            upper: vec![1.3],
        }
    }
}

impl PriorConfig {
    pub fn build(&self) -> Result<ParameterPrior> {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        let family = match self {
            PriorConfig::Gaussian { mean, cov } => PriorFamily::Gaussian {
                mean: v(mean),
                cov: rows_to_matrix(cov, "prior covariance")?,
            },
            PriorConfig::Uniform { lower, upper } => PriorFamily::Uniform {
                lower: v(lower),
                upper: v(upper),
            },
            PriorConfig::Beta {
                alpha,
                beta,
                lower,
                upper,
            } => PriorFamily::Beta {
                alpha: v(alpha),
                beta: v(beta),
                lower: v(lower),
                upper: v(upper),
            },
            PriorConfig::GaussianMixture { weights, means, covs } => PriorFamily::GaussianMixture {
                weights: weights.clone(),
                means: means.iter().map(|m| v(m)).collect(),
                covs: covs
                    .iter()
                    .map(|c| rows_to_matrix(c, "mixture covariance"))
                    .collect::<Result<_>>()?,
            },
        };
        ParameterPrior::new(family)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConfig {
    #[default]
    Gaussian,
    UniformScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { samples: 64, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub samples: usize,
    pub seed: u64,
    /// Tolerance of the covariance check; `0.05 max|Sigma_F|` when absent.
    pub epsilon: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 2,
            epsilon: None,
        }
    }
}

/// Overrides of the terminal margins; each defaults to the scale-aware
/// choice of [`TerminalTarget::with_default_margins`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub delta_mu: Option<Vec<f64>>,
    /// Row-major, `n_x * n_x` entries.
    pub delta_sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub prior: PriorConfig,
    pub noise: NoiseConfig,
    pub sigma_f_theta: f64,
    pub margins: MarginConfig,
    pub formulations: Vec<FormulationTag>,
    /// Parameter revealed to the full-information design; prior mean when
    /// absent.
    pub full_information_parameter: Option<Vec<f64>>,
    pub design: DesignConfig,
    pub evaluation: EvaluationConfig,
    pub gamma: f64,
    pub solver: SolverOptions,
    pub output_dir: PathBuf,
    /// Number of evaluation trials exported as full trajectories.
    pub trajectory_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            prior: PriorConfig::default(),
            noise: NoiseConfig::default(),
            sigma_f_theta: 1e-3,
            margins: MarginConfig::default(),
            formulations: vec![FormulationTag::Ce, FormulationTag::Robust, FormulationTag::Dual],
            full_information_parameter: None,
            design: DesignConfig::default(),
            evaluation: EvaluationConfig::default(),
            gamma: 1.0,
            solver: SolverOptions::default(),
            output_dir: PathBuf::from("results"),
            trajectory_trials: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.design.seed == self.evaluation.seed {
            return Err(Error::Config("design and evaluation seeds must differ".into()));
        }
        if self.design.samples < 2 || self.evaluation.samples < 2 {
            return Err(Error::Config("design and evaluation need at least 2 samples each".into()));
        }
        if !(self.sigma_f_theta > 0.0) || !self.sigma_f_theta.is_finite() {
            return Err(Error::Config("sigma_f_theta must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if let Some(eps) = self.evaluation.epsilon {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(Error::Config("evaluation epsilon must be nonnegative".into()));
            }
        }
        self.solver.validate()
    }

    /// Requested formulations without repeats, in canonical order.
    pub fn formulation_set(&self) -> Vec<FormulationTag> {
        let mut tags = self.formulations.clone();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn steering_spec(&self) -> Result<SteeringSpec> {
        self.validate()?;
        let (sys, init, cost, mu_f, sigma_f) = match &self.system {
            SystemConfig::Vehicle(vp) => {
                let sys = vehicle::build_vehicle_system(vp)?;
                let t = vehicle::default_target(self.sigma_f_theta)?;
                (
                    sys,
                    vehicle::default_initial_state()?,
                    vehicle::default_cost(vp.horizon)?,
                    t.mu_f,
                    t.sigma_f,
                )
            }
            SystemConfig::Raw(raw) => raw.build()?,
        };
        let mut target = TerminalTarget::with_default_margins(mu_f, sigma_f)?;
        if let Some(dm) = &self.margins.delta_mu {
            target.delta_mu = DVector::from_column_slice(dm);
        }
        if let Some(ds) = &self.margins.delta_sigma {
            target.delta_sigma = DVector::from_column_slice(ds);
        }
        let target = TerminalTarget::new(target.mu_f, target.sigma_f, target.delta_mu, target.delta_sigma)?;
        let spec = SteeringSpec {
            sys,
            prior: self.prior.build()?,
            init,
            noise: match self.noise {
                NoiseConfig::Gaussian => NoiseModel::Gaussian,
                NoiseConfig::UniformScaled => NoiseModel::UniformScaled,
            },
            cost,
            target,
            gamma: self.gamma,
            design_samples: self.design.samples,
            design_seed: self.design.seed,
            solver: self.solver.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn epsilon(&self, target: &TerminalTarget) -> f64 {
        self.evaluation.epsilon.unwrap_or(0.05 * target.sigma_f.amax())
    }

    pub fn full_information_parameter(&self, spec: &SteeringSpec) -> DVector<f64> {
        self.full_information_parameter
            .as_ref()
            .map_or_else(|| spec.prior.mean().clone(), |p| DVector::from_column_slice(p))
    }
}

impl RawSystem {
    #[allow(clippy::type_complexity)]
    fn build(
        &self,
    ) -> Result<(
        ParametricAffineSystem,
        InitialStateDistribution,
        StageCost,
        DVector<f64>,
        DMatrix<f64>,
    )> {
        let mats = |m: &[Vec<Vec<f64>>], what: &str| -> Result<Vec<DMatrix<f64>>> {
            m.iter().map(|rows| rows_to_matrix(rows, what)).collect()
        };
        let a = mats(&self.a, "system matrix A")?;
        let b = mats(&self.b, "input matrix B")?;
        let r = self.r.iter().map(|v| DVector::from_column_slice(v)).collect();
        let sys = ParametricAffineSystem::time_invariant(self.horizon, a, b, r, rows_to_matrix(&self.d, "noise matrix D")?)?;
        let init = InitialStateDistribution::gaussian(
            DVector::from_column_slice(&self.x0_mean),
            rows_to_matrix(&self.x0_cov, "initial covariance")?,
        )?;
        let cost = StageCost::time_invariant(
            self.horizon,
            rows_to_matrix(&self.state_weight, "state weight")?,
            rows_to_matrix(&self.control_weight, "control weight")?,
        )?;
        Ok((
            sys,
            init,
            cost,
            DVector::from_column_slice(&self.target_mean),
            rows_to_matrix(&self.target_cov, "target covariance")?,
        ))
    }
}

/// Out-of-sample statistics of one policy.
#[derive(Debug, Clone)]
pub struct EvaluationStats {
    /// Per-trial stage cost (not divided by the trial count).
    pub costs: Vec<f64>,
    pub cost_mean: f64,
    pub cost_std_error: f64,
    pub terminal_mean: DVector<f64>,
    /// `|mean - mu_F|` per component.
    pub term_mean_err: DVector<f64>,
    /// Standard error of each terminal mean component.
    pub term_mean_std_error: DVector<f64>,
    /// Empirical terminal covariance about the empirical mean.
    pub term_cov: DMatrix<f64>,
    /// Largest eigenvalue of `term_cov - Sigma_F`.
    pub cov_excess: f64,
    pub epsilon: f64,
    /// Every component within `delta_mu` plus three standard errors.
    pub mean_ok: bool,
    pub cov_ok: bool,
    pub trajectories: TrajectoryBatch,
    pub p_true: Vec<DVector<f64>>,
}

impl EvaluationStats {
    pub fn satisfied(&self) -> bool {
        self.mean_ok && self.cov_ok
    }
}

/// Rolls `policy` out on `scenarios` and summarizes the terminal state and
/// the cost.
pub fn evaluate_on(
    spec: &SteeringSpec,
    policy: &DualAffinePolicy,
    scenarios: &ScenarioSet,
    epsilon: f64,
) -> Result<EvaluationStats> {
    let traj = scenario::rollout_dual(&spec.sys, policy, scenarios, spec.gamma)?;
    let costs: Vec<f64> = traj.scenarios.iter().map(|s| spec.cost.trajectory_cost(s)).collect();
    let m = costs.len() as f64;
    let cost_mean = costs.iter().sum::<f64>() / m;
    let cost_var = costs.iter().map(|c| (c - cost_mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let terminal = traj.terminal_states();
    let terminal_mean = scenario::terminal_mean(&terminal);
    let term_cov = linalg::symmetrize(&scenario::terminal_second_moment(&terminal, &terminal_mean));
    let term_mean_err = (&terminal_mean - &spec.target.mu_f).abs();
    let term_mean_std_error = term_cov.diagonal().map(|v| (v.max(0.0) / m).sqrt());
    let mean_ok = (0..term_mean_err.len())
        .all(|a| term_mean_err[a] <= spec.target.delta_mu[a] + 3.0 * term_mean_std_error[a]);
    let cov_excess = linalg::max_eigenvalue(&(&term_cov - &spec.target.sigma_f));
    Ok(EvaluationStats {
        cost_std_error: (cost_var / m).sqrt(),
        costs,
        cost_mean,
        terminal_mean,
        term_mean_err,
        term_mean_std_error,
        term_cov,
        cov_excess,
        epsilon,
        mean_ok,
        cov_ok: cov_excess <= epsilon,
        trajectories: traj,
        p_true: scenarios.p.clone(),
    })
}

/// Evaluates `policy` on `m` fresh scenarios drawn with `seed`.
pub fn evaluate_policy(
    spec: &SteeringSpec,
    policy: &DualAffinePolicy,
    m: usize,
    seed: u64,
    epsilon: f64,
) -> Result<EvaluationStats> {
    let scen = draw_scenarios(&spec.sys, &spec.prior, &spec.init, spec.noise, m, seed)?;
    evaluate_on(spec, policy, &scen, epsilon)
}

/// What happened to one formulation in a comparison.
#[derive(Debug, Clone)]
pub enum Outcome {
    Solved(Box<Solution>),
    /// The solve returned an error; the message is kept for the report.
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct FormulationReport {
    pub tag: FormulationTag,
    pub outcome: Outcome,
    /// Present when the solve produced a design-feasible policy.
    pub evaluation: Option<EvaluationStats>,
    pub cost_norm: Option<f64>,
    pub solve_seconds: f64,
    pub evaluation_seconds: f64,
}

impl FormulationReport {
    pub fn solver_result(&self) -> Option<&SolverResult> {
        match &self.outcome {
            Outcome::Solved(s) => Some(&s.result),
            Outcome::Failed(_) => None,
        }
    }

    /// `optimal`, `iteration_limit`, `infeasible` or `failed`.
    pub fn status(&self) -> &'static str {
        match &self.outcome {
            Outcome::Solved(s) => s.result.status.as_str(),
            Outcome::Failed(_) => "failed",
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(&self.outcome, Outcome::Solved(s) if s.result.status == SolverStatus::Infeasible)
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub config: ExperimentConfig,
    pub layout: DecisionLayout,
    pub formulations: Vec<FormulationReport>,
}

impl ComparisonReport {
    pub fn get(&self, tag: FormulationTag) -> Option<&FormulationReport> {
        self.formulations.iter().find(|f| f.tag == tag)
    }

    pub fn any_infeasible(&self) -> bool {
        self.formulations.iter().any(|f| f.is_infeasible())
    }

    /// Deterministic summary keyed by formulation tag.
    pub fn summary_json(&self) -> Value {
        let mut map = BTreeMap::new();
        for f in &self.formulations {
            let entry = match &f.evaluation {
                Some(ev) => json!({
                    "status": f.status(),
                    "cost_mean": ev.cost_mean,
                    "cost_norm": f.cost_norm,
                    "term_mean_err": ev.term_mean_err.as_slice(),
                    "term_cov": matrix_to_rows(&ev.term_cov),
                    "satisfied": ev.satisfied(),
                }),
                None => json!({
                    "status": f.status(),
                    "cost_mean": null,
                    "cost_norm": null,
                    "term_mean_err": null,
                    "term_cov": null,
                    "satisfied": false,
                }),
            };
            map.insert(f.tag.as_str().to_string(), entry);
        }
        json!(map)
    }

    /// Solver statistics, satisfaction details and timings.
    pub fn diagnostics_json(&self) -> Value {
        let mut map = BTreeMap::new();
        for f in &self.formulations {
            let mut entry = serde_json::Map::new();
            entry.insert("status".into(), json!(f.status()));
            entry.insert("solve_seconds".into(), json!(f.solve_seconds));
            entry.insert("evaluation_seconds".into(), json!(f.evaluation_seconds));
            match &f.outcome {
                Outcome::Solved(s) => {
                    let r = &s.result;
                    entry.insert(
                        "solver".into(),
                        json!({
                            "objective": r.objective,
                            "max_violation": r.max_violation,
                            "lagrangian_gradient": r.lagrangian_gradient,
                            "complementarity": r.complementarity,
                            "penalty": r.penalty,
                            "outer_iterations": r.outer_iterations,
                            "inner_iterations": r.inner_iterations,
                            "evaluations": r.evaluations,
                        }),
                    );
                }
                Outcome::Failed(msg) => {
                    entry.insert("error".into(), json!(msg));
                }
            }
            if let Some(ev) = &f.evaluation {
                entry.insert(
                    "evaluation".into(),
                    json!({
                        "cost_std_error": ev.cost_std_error,
                        "term_mean_std_error": ev.term_mean_std_error.as_slice(),
                        "cov_excess": ev.cov_excess,
                        "epsilon": ev.epsilon,
                        "mean_ok": ev.mean_ok,
                        "cov_ok": ev.cov_ok,
                    }),
                );
            }
            map.insert(f.tag.as_str().to_string(), Value::Object(entry));
        }
        json!(map)
    }
}

/// Whether a solve produced a policy worth evaluating: not declared
/// infeasible and within the constraint tolerance on its design scenarios.
pub fn is_design_feasible(result: &SolverResult, opts: &SolverOptions) -> bool {
    result.status != SolverStatus::Infeasible && result.max_violation <= opts.constraint_tolerance
}

/// Solves the requested formulations on one shared design set and evaluates
/// them on one shared evaluation set. Certainty equivalence, static robust
/// and adaptive dual are solved as a warm-started chain, so requesting a
/// later link also solves the earlier ones. A failed solve is recorded and
/// the run goes on.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    let spec = cfg.steering_spec()?;
    let design = spec.design_scenarios()?;
    let eval = draw_scenarios(&spec.sys, &spec.prior, &spec.init, spec.noise, cfg.evaluation.samples, cfg.evaluation.seed)?;
    let epsilon = cfg.epsilon(&spec.target);
    let tags = cfg.formulation_set();
    let wants = |t: FormulationTag| tags.contains(&t);

    let mut solved: BTreeMap<FormulationTag, (Outcome, f64)> = BTreeMap::new();
    let timed = |f: &dyn Fn() -> Result<Solution>| {
        let t = Instant::now();
        let out = match f() {
            Ok(s) => Outcome::Solved(Box::new(s)),
            Err(e) => Outcome::Failed(e.to_string()),
        };
        (out, t.elapsed().as_secs_f64())
    };
    let optimal = |o: &Outcome| match o {
        Outcome::Solved(s) if s.is_optimal() => Some(s.as_ref().clone()),
        _ => None,
    };

    let cold = spec.cold_start()?;
    let need_ce = wants(FormulationTag::Ce) || wants(FormulationTag::Robust) || wants(FormulationTag::Dual);
    let need_robust = wants(FormulationTag::Robust) || wants(FormulationTag::Dual);
    let mut ce_sol = None;
    if need_ce {
        let r = timed(&|| solve_formulation(&spec, &design, Formulation::CertaintyEquivalence, &cold, &WarmStart::default()));
        ce_sol = optimal(&r.0);
        solved.insert(FormulationTag::Ce, r);
    }
    let robust_start = ce_sol.as_ref().map_or_else(|| cold.clone(), |s| s.result.z.clone());
    let mut robust_sol = None;
    if need_robust {
        let r = timed(&|| solve_formulation(&spec, &design, Formulation::StaticRobust, &robust_start, &WarmStart::default()));
        robust_sol = optimal(&r.0);
        solved.insert(FormulationTag::Robust, r);
    }
    if wants(FormulationTag::Dual) {
        let (start, warm) = robust_sol
            .as_ref()
            .map_or_else(|| (robust_start.clone(), WarmStart::default()), |s| (s.result.z.clone(), s.warm_start()));
        let r = timed(&|| solve_formulation(&spec, &design, Formulation::AdaptiveDual, &start, &warm));
        solved.insert(FormulationTag::Dual, r);
    }
    if wants(FormulationTag::Fullinfo) {
        let p_star = cfg.full_information_parameter(&spec);
        let r = timed(&|| {
            linalg::check_len(&p_star, spec.sys.n_p(), "full-information parameter")?;
            solve_formulation(&spec, &design, Formulation::FullInformation(p_star.clone()), &cold, &WarmStart::default())
        });
        solved.insert(FormulationTag::Fullinfo, r);
    }

    let mut reports = Vec::new();
    for tag in tags {
        let (outcome, solve_seconds) = solved.remove(&tag).expect("every requested formulation was solved");
        let t = Instant::now();
        let evaluation = match &outcome {
            Outcome::Solved(s) if is_design_feasible(&s.result, &spec.solver) => {
                Some(evaluate_on(&spec, &s.policy, &eval, epsilon)?)
            }
            _ => None,
        };
        reports.push(FormulationReport {
            tag,
            outcome,
            evaluation,
            cost_norm: None,
            solve_seconds,
            evaluation_seconds: t.elapsed().as_secs_f64(),
        });
    }
    let reference = reports
        .iter()
        .find(|f| f.tag == FormulationTag::Dual)
        .and_then(|f| f.evaluation.as_ref())
        .map(|ev| ev.cost_mean);
    if let Some(base) = reference {
        for f in &mut reports {
            f.cost_norm = f.evaluation.as_ref().map(|ev| ev.cost_mean / base);
        }
    }
    Ok(ComparisonReport {
        config: cfg.clone(),
        layout: spec.layout(),
        formulations: reports,
    })
}

/// Gains and slack of a solved policy in the canonical layout, with the
/// header needed to unpack them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub formulation: FormulationTag,
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_p: usize,
    pub z: Vec<f64>,
}

impl PolicyFile {
    pub fn new(tag: FormulationTag, layout: &DecisionLayout, z: &[f64]) -> Result<Self> {
        if z.len() != layout.len() {
            return Err(Error::dim("policy vector", layout.len(), z.len()));
        }
        Ok(Self {
            formulation: tag,
            horizon: layout.horizon,
            n_x: layout.n_x,
            n_u: layout.n_u,
            n_p: layout.n_p,
            z: z.to_vec(),
        })
    }

    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout {
            horizon: self.horizon,
            n_x: self.n_x,
            n_u: self.n_u,
            n_p: self.n_p,
        }
    }

    pub fn unpack(&self) -> Result<(DualAffinePolicy, DMatrix<f64>)> {
        self.layout().unpack(&self.z)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json_text(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Header of the per-trial CSV.
pub fn trial_header(n_x: usize, n_p: usize) -> Vec<String> {
    let mut h = vec!["formulation".to_string(), "trial".into(), "cost".into()];
    h.extend((0..n_x).map(|a| format!("x_N{a}")));
    h.extend((0..n_p).map(|a| format!("p_true{a}")));
    h.extend((0..n_p).map(|a| format!("p_hat_N{a}")));
    h.push("satisfied".into());
    h
}

/// Appends one row per trial of `ev` to `out`.
pub fn write_trial_rows<W: std::io::Write>(
    out: &mut csv::Writer<W>,
    tag: FormulationTag,
    ev: &EvaluationStats,
) -> std::result::Result<(), csv::Error> {
    for (i, s) in ev.trajectories.scenarios.iter().enumerate() {
        let mut row = vec![tag.as_str().to_string(), i.to_string(), fmt_f64(ev.costs[i])];
        row.extend(s.terminal().iter().map(|v| fmt_f64(*v)));
        row.extend(ev.p_true[i].iter().map(|v| fmt_f64(*v)));
        row.extend(s.p_hat.last().expect("nonempty trajectory").iter().map(|v| fmt_f64(*v)));
        row.push(ev.satisfied().to_string());
        out.write_record(&row)?;
    }
    Ok(())
}

/// Writes every result file of `report` into `dir`, creating it if needed.
pub fn emit_outputs(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_text(&dir.join("summary.json"), &to_json_text(&report.summary_json())?)?;
    write_text(&dir.join("diagnostics.json"), &to_json_text(&report.diagnostics_json())?)?;

    let trials = dir.join("trials.csv");
    let wrap = |source| Error::Csv {
        path: trials.clone(),
        source,
    };
    let mut out = csv::Writer::from_path(&trials).map_err(wrap)?;
    out.write_record(trial_header(report.layout.n_x, report.layout.n_p)).map_err(wrap)?;
    for f in &report.formulations {
        if let Some(ev) = &f.evaluation {
            write_trial_rows(&mut out, f.tag, ev).map_err(wrap)?;
        }
    }
    out.flush().map_err(|source| Error::Io {
        path: trials.clone(),
        source,
    })?;

    for f in &report.formulations {
        let tag = f.tag.as_str();
        if let Outcome::Solved(s) = &f.outcome {
            PolicyFile::new(f.tag, &report.layout, &s.result.z)?.write(&dir.join(format!("policy_{tag}.json")))?;
            write_iteration_log(&dir.join(format!("solver_{tag}.log")), &s.result)?;
        }
        if let Some(ev) = &f.evaluation {
            let subset: Vec<usize> = (0..report.config.trajectory_trials.min(ev.trajectories.len())).collect();
            scenario::write_trajectory_csv(&dir.join(format!("trajectories_{tag}.csv")), &ev.trajectories, &subset)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            sigma_f_theta = 1e-4
            formulations = ["dual", "robust"]
            [system]
            model = "vehicle"
            speed = 12.0
            [prior]
            family = "beta"
            alpha = [0.5]
            beta = [0.5]
            lower = [0.7]
            upper = [1.3]
            [solver]
            max_outer_iterations = 5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.sigma_f_theta, 1e-4);
        assert_eq!(cfg.formulation_set(), vec![FormulationTag::Robust, FormulationTag::Dual]);
        match &cfg.system {
            SystemConfig::Vehicle(vp) => {
                assert_eq!(vp.speed, 12.0);
                assert_eq!(vp.horizon, 20);
            }
            other => panic!("unexpected system {other:?}"),
        }
        assert_eq!(cfg.solver.max_outer_iterations, 5);
        assert_eq!(cfg.solver.memory, SolverOptions::default().memory);
        assert_eq!(cfg.design.samples, 64);
        let spec = cfg.steering_spec().unwrap();
        assert_eq!(spec.target.sigma_f[(1, 1)], 1e-4);
    }

    #[test]
    fn bad_configs_rejected() {
        for text in [
            "unknown_key = 1",
            "[design]\nseed = 2",
            "gamma = 1.5",
            "formulations = [\"oracle\"]",
            "[prior]\nfamily = \"cauchy\"",
            "[solver]\npenalty_growth = 0.5",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn formulation_tags_parse() {
        for t in FormulationTag::ALL {
            assert_eq!(FormulationTag::parse(t.as_str()).unwrap(), t);
        }
        assert!(FormulationTag::parse("static").is_err());
    }

    #[test]
    fn prior_configs_build() {
        let g = PriorConfig::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.85], vec![1.15]],
            covs: vec![vec![vec![0.0025]]; 2],
        }
        .build()
        .unwrap();
        assert!((g.mean()[0] - 1.0).abs() < 1e-15);
        assert!((g.cov()[(0, 0)] - (0.0025 + 0.15 * 0.15)).abs() < 1e-15);
    }

    #[test]
    fn trial_header_width() {
        assert_eq!(trial_header(3, 1).len(), 4 + 3 + 2);
        assert_eq!(trial_header(4, 2).len(), 4 + 4 + 4);
    }
}
