//! Front doors for the four steering formulations over one shared problem
//! description.
//!
//! Solves are chained: certainty equivalence starts from zero gains with
//! `V = chol(Sigma_F)`, the static robust problem starts from the certainty
//! equivalence point, and the adaptive problem starts from the static robust
//! point (its canonical vector already is the embedded dual policy) together
//! with its multipliers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{InitialStateDistribution, NoiseModel, ParameterPrior, ParametricAffineSystem};
use crate::policy::{DualAffinePolicy, StaticAffinePolicy};
use crate::saa_nlp::{DecisionLayout, Formulation, SaaProblem, TerminalTarget};
use crate::scenario::{draw_scenarios, ScenarioSet, StageCost};
use crate::solver::{self, SolverOptions, SolverResult, SolverStatus, WarmStart};

/// Everything needed to pose and solve one steering problem.
#[derive(Debug, Clone)]
pub struct SteeringSpec {
    pub sys: ParametricAffineSystem,
    pub prior: ParameterPrior,
    pub init: InitialStateDistribution,
    pub noise: NoiseModel,
    pub cost: StageCost,
    pub target: TerminalTarget,
    /// RLS forgetting factor.
    pub gamma: f64,
    pub design_samples: usize,
    pub design_seed: u64,
    pub solver: SolverOptions,
}

impl SteeringSpec {
    pub fn validate(&self) -> Result<()> {
        if self.design_samples < 2 {
            return Err(Error::invalid("design sample count", "need at least 2 scenarios"));
        }
        if self.prior.dim() != self.sys.n_p() {
            return Err(Error::dim("prior dimension", self.sys.n_p(), self.prior.dim()));
        }
        if self.cost.horizon() != self.sys.horizon() {
            return Err(Error::dim("cost horizon", self.sys.horizon(), self.cost.horizon()));
        }
        if self.target.mu_f.len() != self.sys.n_x() {
            return Err(Error::dim("terminal target", self.sys.n_x(), self.target.mu_f.len()));
        }
        self.solver.validate()
    }

    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout::for_system(&self.sys)
    }

    pub fn design_scenarios(&self) -> Result<ScenarioSet> {
        draw_scenarios(&self.sys, &self.prior, &self.init, self.noise, self.design_samples, self.design_seed)
    }

    /// The SAA problem of `formulation` on `scenarios`, with its substitutions
    /// and frozen coordinates applied.
    pub fn problem(&self, scenarios: &ScenarioSet, formulation: Formulation) -> Result<SaaProblem> {
        Ok(SaaProblem::new(
            self.sys.clone(),
            self.cost.clone(),
            self.target.clone(),
            self.gamma,
            scenarios.clone(),
            formulation,
        )?
        .specialize())
    }

    /// Zero gains with `V` the Cholesky factor of the target covariance.
    pub fn cold_start(&self) -> Result<Vec<f64>> {
        let lay = self.layout();
        let chol = self
            .target
            .sigma_f
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("terminal covariance", "not positive definite"))?;
        lay.pack(
            &DualAffinePolicy::zeros(lay.horizon, lay.n_x, lay.n_u, lay.n_p),
            &chol.l(),
        )
    }
}

/// A solved formulation.
#[derive(Debug, Clone)]
pub struct Solution {
    pub formulation: Formulation,
    /// For static formulations every adaptive block is zero.
    pub policy: DualAffinePolicy,
    pub slack: DMatrix<f64>,
    pub result: SolverResult,
}

impl Solution {
    pub fn static_policy(&self) -> StaticAffinePolicy {
        self.policy.nominal_part()
    }

    pub fn is_optimal(&self) -> bool {
        self.result.status == SolverStatus::Optimal
    }

    /// Warm start handed to the next formulation in the chain. Multipliers of
    /// a failed solve are not passed on.
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            multipliers: self.is_optimal().then(|| self.result.multipliers.clone()),
            penalty: None,
        }
    }
}

/// Solves `formulation` on `scenarios` from `z0`.
pub fn solve_formulation(
    spec: &SteeringSpec,
    scenarios: &ScenarioSet,
    formulation: Formulation,
    z0: &[f64],
    warm: &WarmStart,
) -> Result<Solution> {
    spec.validate()?;
    let problem = spec.problem(scenarios, formulation.clone())?;
    let z0 = problem.project(z0);
    let result = solver::solve(&problem, &z0, warm, &spec.solver)?;
    let (policy, slack) = problem.layout().unpack(&result.z)?;
    Ok(Solution {
        formulation,
        policy,
        slack,
        result,
    })
}

/// The chain certainty equivalence -> static robust -> adaptive dual on one
/// shared scenario set. A failed link falls back to the last optimal point.
#[derive(Debug, Clone)]
pub struct SolveChain {
    pub certainty_equivalence: Solution,
    pub static_robust: Solution,
    pub adaptive_dual: Solution,
}

pub fn solve_chain(spec: &SteeringSpec, scenarios: &ScenarioSet) -> Result<SolveChain> {
    let cold = spec.cold_start()?;
    let ce = solve_formulation(spec, scenarios, Formulation::CertaintyEquivalence, &cold, &WarmStart::default())?;
    let robust_start = if ce.is_optimal() { &ce.result.z } else { &cold };
    let robust = solve_formulation(spec, scenarios, Formulation::StaticRobust, robust_start, &WarmStart::default())?;
    let (dual_start, dual_warm) = if robust.is_optimal() {
        (&robust.result.z, robust.warm_start())
    } else {
        (robust_start, WarmStart::default())
    };
    let dual = solve_formulation(spec, scenarios, Formulation::AdaptiveDual, dual_start, &dual_warm)?;
    Ok(SolveChain {
        certainty_equivalence: ce,
        static_robust: robust,
        adaptive_dual: dual,
    })
}

pub fn solve_certainty_equivalence(spec: &SteeringSpec) -> Result<Solution> {
    let scen = spec.design_scenarios()?;
    solve_formulation(spec, &scen, Formulation::CertaintyEquivalence, &spec.cold_start()?, &WarmStart::default())
}

pub fn solve_static_robust(spec: &SteeringSpec) -> Result<Solution> {
    let scen = spec.design_scenarios()?;
    let ce = solve_formulation(spec, &scen, Formulation::CertaintyEquivalence, &spec.cold_start()?, &WarmStart::default())?;
    let start = if ce.is_optimal() { ce.result.z } else { spec.cold_start()? };
    solve_formulation(spec, &scen, Formulation::StaticRobust, &start, &WarmStart::default())
}

pub fn solve_adaptive_dual(spec: &SteeringSpec) -> Result<Solution> {
    let scen = spec.design_scenarios()?;
    Ok(solve_chain(spec, &scen)?.adaptive_dual)
}

/// Static policy designed with the parameter revealed as `p_star`.
pub fn solve_full_information(spec: &SteeringSpec, p_star: &DVector<f64>) -> Result<Solution> {
    linalg::check_len(p_star, spec.sys.n_p(), "revealed parameter")?;
    let scen = spec.design_scenarios()?;
    solve_formulation(
        spec,
        &scen,
        Formulation::FullInformation(p_star.clone()),
        &spec.cold_start()?,
        &WarmStart::default(),
    )
}
