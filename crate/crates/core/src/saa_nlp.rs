//! The sample-average steering problem as a smooth inequality-constrained
//! NLP over the policy gains and the covariance slack `V`.
//!
//! Decision vectors use one canonical layout: k-major, then block `j`
//! ascending, and within each `(k, j)` the feedforward entries followed by
//! the feedback matrix in row-major order. The slack `V` comes last,
//! row-major.
//!
//! Gradients are exact: each scenario is rolled forward once with its
//! intermediates recorded, then swept backwards through the coupled
//! state / estimator recursion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len, check_shape};
use crate::model::ParametricAffineSystem;
use crate::policy::DualAffinePolicy;
use crate::scenario::{self, ScenarioSet, ScenarioTrace, StageCost};
use crate::solver::{BlockPreconditioner, ConstrainedProblem};

/// Dimensions that fix the canonical decision-vector layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_p: usize,
}

impl DecisionLayout {
    pub fn for_system(sys: &ParametricAffineSystem) -> Self {
        Self {
            horizon: sys.horizon(),
            n_x: sys.n_x(),
            n_u: sys.n_u(),
            n_p: sys.n_p(),
        }
    }

    fn block_len(&self) -> usize {
        self.n_u + self.n_u * self.n_x
    }

    pub fn gains_len(&self) -> usize {
        self.horizon * (self.n_p + 1) * self.block_len()
    }

    pub fn len(&self) -> usize {
        self.gains_len() + self.n_x * self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn block_offset(&self, k: usize, j: usize) -> usize {
        (k * (self.n_p + 1) + j) * self.block_len()
    }

    pub fn feedforward_index(&self, k: usize, j: usize, a: usize) -> usize {
        self.block_offset(k, j) + a
    }

    pub fn feedback_index(&self, k: usize, j: usize, a: usize, b: usize) -> usize {
        self.block_offset(k, j) + self.n_u + a * self.n_x + b
    }

    pub fn slack_index(&self, a: usize, b: usize) -> usize {
        self.gains_len() + a * self.n_x + b
    }

    /// True for coordinates that belong to an adaptive (`j >= 1`) block.
    pub fn is_adaptive(&self, index: usize) -> bool {
        index < self.gains_len() && (index / self.block_len()) % (self.n_p + 1) != 0
    }

    pub fn pack(&self, policy: &DualAffinePolicy, slack: &DMatrix<f64>) -> Result<Vec<f64>> {
        if policy.horizon() != self.horizon || policy.n_p() != self.n_p {
            return Err(Error::invalid("policy", "does not match decision layout"));
        }
        check_shape(slack, self.n_x, self.n_x, "slack")?;
        let mut z = Vec::with_capacity(self.len());
        for k in 0..self.horizon {
            for j in 0..=self.n_p {
                let v = &policy.feedforward[k][j];
                let l = &policy.feedback[k][j];
                check_len(v, self.n_u, "feedforward gain")?;
                check_shape(l, self.n_u, self.n_x, "feedback gain")?;
                z.extend(v.iter());
                for a in 0..self.n_u {
                    z.extend((0..self.n_x).map(|b| l[(a, b)]));
                }
            }
        }
        for a in 0..self.n_x {
            z.extend((0..self.n_x).map(|b| slack[(a, b)]));
        }
        Ok(z)
    }

    pub fn unpack(&self, z: &[f64]) -> Result<(DualAffinePolicy, DMatrix<f64>)> {
        if z.len() != self.len() {
            return Err(Error::dim("decision vector", self.len(), z.len()));
        }
        let mut policy = DualAffinePolicy::zeros(self.horizon, self.n_x, self.n_u, self.n_p);
        for k in 0..self.horizon {
            for j in 0..=self.n_p {
                let o = self.block_offset(k, j);
                policy.feedforward[k][j] = DVector::from_column_slice(&z[o..o + self.n_u]);
                policy.feedback[k][j] = DMatrix::from_row_slice(self.n_u, self.n_x, &z[o + self.n_u..o + self.block_len()]);
            }
        }
        let s = self.gains_len();
        let slack = DMatrix::from_row_slice(self.n_x, self.n_x, &z[s..]);
        Ok((policy, slack))
    }
}

/// A decision vector tagged with its layout, as written to policy files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub layout: DecisionLayout,
    pub values: Vec<f64>,
}

impl DecisionVector {
    pub fn pack(layout: DecisionLayout, policy: &DualAffinePolicy, slack: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            layout,
            values: layout.pack(policy, slack)?,
        })
    }

    pub fn unpack(&self) -> Result<(DualAffinePolicy, DMatrix<f64>)> {
        self.layout.unpack(&self.values)
    }
}

/// Which steering problem the SAA represents.
#[derive(Debug, Clone, PartialEq)]
pub enum Formulation {
    /// Every scenario uses the prior mean parameter; static policy.
    CertaintyEquivalence,
    /// Random parameters; static policy.
    StaticRobust,
    /// Random parameters; estimate-scheduled policy.
    AdaptiveDual,
    /// Every scenario uses the given realization; static policy.
    FullInformation(DVector<f64>),
}

impl Formulation {
    pub fn is_static(&self) -> bool {
        !matches!(self, Formulation::AdaptiveDual)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Formulation::CertaintyEquivalence => "ce",
            Formulation::StaticRobust => "robust",
            Formulation::AdaptiveDual => "dual",
            Formulation::FullInformation(_) => "fullinfo",
        }
    }
}

/// Terminal mean / covariance targets and their admissible margins.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTarget {
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    pub delta_mu: DVector<f64>,
    /// Row-major, one entry per covariance element.
    pub delta_sigma: DVector<f64>,
}

impl TerminalTarget {
    /// Margins `0.02 sqrt(diag Sigma_F)` on the mean and
    /// `0.05 max|Sigma_F|` on every covariance entry.
    pub fn with_default_margins(mu_f: DVector<f64>, sigma_f: DMatrix<f64>) -> Result<Self> {
        let n = mu_f.len();
        check_shape(&sigma_f, n, n, "terminal covariance")?;
        let delta_mu = sigma_f.diagonal().map(|s| 0.02 * s.max(0.0).sqrt());
        let delta_sigma = DVector::from_element(n * n, 0.05 * sigma_f.amax());
        Self::new(mu_f, sigma_f, delta_mu, delta_sigma)
    }

    pub fn new(mu_f: DVector<f64>, sigma_f: DMatrix<f64>, delta_mu: DVector<f64>, delta_sigma: DVector<f64>) -> Result<Self> {
        let n = mu_f.len();
        check_shape(&sigma_f, n, n, "terminal covariance")?;
        linalg::require_pd(&sigma_f, "terminal covariance")?;
        check_len(&delta_mu, n, "mean margin")?;
        check_len(&delta_sigma, n * n, "covariance margin")?;
        if delta_mu.iter().chain(delta_sigma.iter()).any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("terminal margins", "every margin must be positive"));
        }
        Ok(Self {
            mu_f,
            sigma_f,
            delta_mu,
            delta_sigma,
        })
    }

    pub fn num_constraints(&self) -> usize {
        let n = self.mu_f.len();
        2 * n + 2 * n * n
    }
}

/// Values at one decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SaaEvaluation {
    pub objective: f64,
    /// `c(z) <= 0` convention.
    pub constraints: Vec<f64>,
    /// Smallest pivot of the estimator's `gamma I + Gamma P Gamma^T`
    /// factorizations across the rollout.
    pub min_pivot: f64,
}

#[derive(Debug, Clone)]
pub struct SaaProblem {
    pub sys: ParametricAffineSystem,
    pub cost: StageCost,
    pub target: TerminalTarget,
    pub gamma: f64,
    pub scenarios: ScenarioSet,
    pub formulation: Formulation,
    layout: DecisionLayout,
    /// `false` for coordinates frozen at zero.
    free: Vec<bool>,
}

impl SaaProblem {
    pub fn new(
        sys: ParametricAffineSystem,
        cost: StageCost,
        target: TerminalTarget,
        gamma: f64,
        scenarios: ScenarioSet,
        formulation: Formulation,
    ) -> Result<Self> {
        if cost.horizon() != sys.horizon() {
            return Err(Error::dim("stage cost horizon", sys.horizon(), cost.horizon()));
        }
        check_len(&target.mu_f, sys.n_x(), "terminal mean")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid("forgetting factor", format!("{gamma} not in (0, 1]")));
        }
        if let Formulation::FullInformation(p) = &formulation {
            check_len(p, sys.n_p(), "full-information parameter")?;
        }
        if scenarios.is_empty() {
            return Err(Error::invalid("scenario set", "no scenarios"));
        }
        let layout = DecisionLayout::for_system(&sys);
        Ok(Self {
            free: vec![true; layout.len()],
            sys,
            cost,
            target,
            gamma,
            scenarios,
            formulation,
            layout,
        })
    }

    pub fn layout(&self) -> DecisionLayout {
        self.layout
    }

    pub fn is_free(&self, index: usize) -> bool {
        self.free[index]
    }

    /// Applies the formulation: pins scenario parameters where the
    /// formulation fixes them and freezes the adaptive blocks of static
    /// formulations at zero.
    pub fn specialize(&self) -> SaaProblem {
        let mut out = self.clone();
        match &self.formulation {
            Formulation::CertaintyEquivalence => {
                out.scenarios = self.scenarios.with_parameter(&self.scenarios.prior_mean);
            }
            Formulation::FullInformation(p) => {
                out.scenarios = self.scenarios.with_parameter(p);
            }
            Formulation::StaticRobust | Formulation::AdaptiveDual => {}
        }
        let freeze = self.formulation.is_static();
        out.free = (0..self.layout.len())
            .map(|i| !(freeze && self.layout.is_adaptive(i)))
            .collect();
        out
    }

    /// `z` with frozen coordinates forced to zero.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.free).map(|(&v, &f)| if f { v } else { 0.0 }).collect()
    }

    fn mask(&self, g: &mut [f64]) {
        for (gi, &f) in g.iter_mut().zip(&self.free) {
            if !f {
                *gi = 0.0;
            }
        }
    }

    fn forward(&self, z: &[f64], record: bool) -> Result<(DualAffinePolicy, DMatrix<f64>, Vec<ScenarioTrace>)> {
        if z.len() != self.layout.len() {
            return Err(Error::dim("decision vector", self.layout.len(), z.len()));
        }
        if !linalg::all_finite(z) {
            return Err(Error::NonFinite("decision vector".into()));
        }
        let (policy, slack) = self.layout.unpack(&self.project(z))?;
        let traces = (0..self.scenarios.len())
            .into_par_iter()
            .map(|i| {
                scenario::simulate(
                    &self.sys,
                    &self.scenarios,
                    i,
                    self.gamma,
                    |k, x, p| policy.eval_unchecked(k, x, p),
                    record,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((policy, slack, traces))
    }

    fn values(&self, slack: &DMatrix<f64>, traces: &[ScenarioTrace]) -> SaaEvaluation {
        let m = traces.len();
        let objective = traces.iter().map(|t| self.cost.trajectory_cost(&t.traj)).sum::<f64>()
            * self.cost.scenario_weight(m);
        let terminal: Vec<_> = traces.iter().map(|t| t.traj.terminal().clone()).collect();
        let mean_err = scenario::terminal_mean(&terminal) - &self.target.mu_f;
        let cov_err = scenario::terminal_second_moment(&terminal, &self.target.mu_f) + slack * slack.transpose()
            - &self.target.sigma_f;
        let cov_err = linalg::vec_row_major(&cov_err);
        let t = &self.target;
        let mut c = Vec::with_capacity(t.num_constraints());
        c.extend(mean_err.iter().zip(t.delta_mu.iter()).map(|(e, d)| e - d));
        c.extend(mean_err.iter().zip(t.delta_mu.iter()).map(|(e, d)| -e - d));
        c.extend(cov_err.iter().zip(t.delta_sigma.iter()).map(|(e, d)| e - d));
        c.extend(cov_err.iter().zip(t.delta_sigma.iter()).map(|(e, d)| -e - d));
        SaaEvaluation {
            objective,
            constraints: c,
            min_pivot: traces.iter().map(|t| t.min_pivot).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<SaaEvaluation> {
        let (_, slack, traces) = self.forward(z, false)?;
        let eval = self.values(&slack, &traces);
        if !eval.objective.is_finite() || !linalg::all_finite(&eval.constraints) {
            return Err(Error::NonFinite("SAA objective or constraints".into()));
        }
        Ok(eval)
    }

    /// Objective value and its exact gradient.
    pub fn eval_objective(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let zeros = vec![0.0; self.target.num_constraints()];
        let (eval, g) = self.weighted_gradient(z, 1.0, &zeros)?;
        Ok((eval.objective, g))
    }

    /// Constraint residuals and their exact Jacobian (rows = constraints).
    pub fn eval_constraints(&self, z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (policy, slack, traces) = self.forward(z, true)?;
        let eval = self.values(&slack, &traces);
        let n_x = self.sys.n_x();
        let n = self.layout.len();
        let m = traces.len() as f64;
        let mu_f = &self.target.mu_f;
        // Per-scenario sensitivities of the terminal state: n_x sweeps each.
        let sens: Vec<DMatrix<f64>> = traces
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let mut jac = DMatrix::zeros(n_x, self.layout.gains_len());
                for a in 0..n_x {
                    let mut seed = DVector::zeros(n_x);
                    seed[a] = 1.0;
                    let g = self.reverse_sweep(&policy, i, tr, 0.0, seed);
                    jac.set_row(a, &DVector::from_vec(g).transpose());
                }
                jac
            })
            .collect();
        let rows = self.target.num_constraints();
        let mut jac = DMatrix::zeros(rows, n);
        let gl = self.layout.gains_len();
        let mut mean_rows = DMatrix::zeros(n_x, gl);
        let mut cov_rows = DMatrix::zeros(n_x * n_x, gl);
        for (tr, s) in traces.iter().zip(&sens) {
            let d = tr.traj.terminal() - mu_f;
            mean_rows += s;
            for a in 0..n_x {
                for b in 0..n_x {
                    let mut row = cov_rows.row_mut(a * n_x + b);
                    row += s.row(a) * d[b] + s.row(b) * d[a];
                }
            }
        }
        mean_rows /= m;
        cov_rows /= m;
        let nn = n_x * n_x;
        for a in 0..n_x {
            jac.view_mut((a, 0), (1, gl)).copy_from(&mean_rows.row(a));
            jac.view_mut((n_x + a, 0), (1, gl)).copy_from(&(-mean_rows.row(a)));
        }
        for r in 0..nn {
            jac.view_mut((2 * n_x + r, 0), (1, gl)).copy_from(&cov_rows.row(r));
            jac.view_mut((2 * n_x + nn + r, 0), (1, gl)).copy_from(&(-cov_rows.row(r)));
            // d (V V^T)_ab / d V_ec = delta_ae V_bc + delta_be V_ac
            let (a, b) = (r / n_x, r % n_x);
            for c in 0..n_x {
                let mut add = |e: usize, val: f64| {
                    let col = self.layout.slack_index(e, c);
                    jac[(2 * n_x + r, col)] += val;
                    jac[(2 * n_x + nn + r, col)] -= val;
                };
                add(a, slack[(b, c)]);
                add(b, slack[(a, c)]);
            }
        }
        for col in 0..n {
            if !self.free[col] {
                jac.column_mut(col).fill(0.0);
            }
        }
        Ok((eval.constraints, jac))
    }

    /// Gradient of `w0 f(z) + sum_r w_r c_r(z)`, with one reverse sweep per
    /// scenario.
    pub fn weighted_gradient(&self, z: &[f64], w0: f64, weights: &[f64]) -> Result<(SaaEvaluation, Vec<f64>)> {
        let (policy, slack, traces) = self.forward(z, true)?;
        let eval = self.values(&slack, &traces);
        if !eval.objective.is_finite() || !linalg::all_finite(&eval.constraints) {
            return Err(Error::NonFinite("SAA objective or constraints".into()));
        }
        let g = self.gradient_from_traces(&policy, &slack, &traces, w0, weights)?;
        Ok((eval, g))
    }

    fn gradient_from_traces(
        &self,
        policy: &DualAffinePolicy,
        slack: &DMatrix<f64>,
        traces: &[ScenarioTrace],
        w0: f64,
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let n_x = self.sys.n_x();
        let nn = n_x * n_x;
        if weights.len() != self.target.num_constraints() {
            return Err(Error::dim("constraint weights", self.target.num_constraints(), weights.len()));
        }
        let m = traces.len() as f64;
        let mean_w = DVector::from_fn(n_x, |a, _| weights[a] - weights[n_x + a]);
        let cov_w = DMatrix::from_fn(n_x, n_x, |a, b| weights[2 * n_x + a * n_x + b] - weights[2 * n_x + nn + a * n_x + b]);
        let cov_sym = &cov_w + cov_w.transpose();
        let cost_weight = w0 * self.cost.scenario_weight(traces.len());
        let per: Vec<Vec<f64>> = traces
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let d = tr.traj.terminal() - &self.target.mu_f;
                let seed = (&mean_w + &cov_sym * d) / m;
                self.reverse_sweep(policy, i, tr, cost_weight, seed)
            })
            .collect();
        let mut g = vec![0.0; self.layout.len()];
        for gi in &per {
            for (acc, v) in g.iter_mut().zip(gi) {
                *acc += v;
            }
        }
        let vg = &cov_sym * slack;
        for a in 0..n_x {
            for c in 0..n_x {
                g[self.layout.slack_index(a, c)] = vg[(a, c)];
            }
        }
        self.mask(&mut g);
        if !linalg::all_finite(&g) {
            return Err(Error::NonFinite("SAA gradient".into()));
        }
        Ok(g)
    }

    /// Reverse sweep through one scenario. `cost_weight` scales the stage
    /// cost and `terminal_seed` is the adjoint of the terminal state.
    /// Returns the gradient over the gain coordinates.
    fn reverse_sweep(
        &self,
        policy: &DualAffinePolicy,
        i: usize,
        trace: &ScenarioTrace,
        cost_weight: f64,
        terminal_seed: DVector<f64>,
    ) -> Vec<f64> {
        let sys = &self.sys;
        let lay = &self.layout;
        let (n_p, n_u, n_x) = (sys.n_p(), sys.n_u(), sys.n_x());
        let gamma = self.gamma;
        let p_true = &self.scenarios.p[i];
        let traj = &trace.traj;
        let mut grad = vec![0.0; lay.gains_len()];
        // Adjoints carried between steps and their next-step values.
        let mut xb = terminal_seed;
        let mut pb = DVector::<f64>::zeros(n_p);
        let mut cb = DMatrix::<f64>::zeros(n_p, n_p);
        let mut xb_k = DVector::<f64>::zeros(n_x);
        let mut pb_k = DVector::<f64>::zeros(n_p);
        let mut cb_k = DMatrix::<f64>::zeros(n_p, n_p);
        // Scratch.
        let mut gte = DVector::<f64>::zeros(n_p);
        let mut gte_b = DVector::<f64>::zeros(n_p);
        let mut eb = DVector::<f64>::zeros(n_x);
        let mut gb = DMatrix::<f64>::zeros(n_x, n_p);
        let mut raw_b = DMatrix::<f64>::zeros(n_p, n_p);
        // Adjoint of P G^T, stored transposed.
        let mut pgb_t = DMatrix::<f64>::zeros(n_x, n_p);
        let mut wb = DMatrix::<f64>::zeros(n_x, n_p);
        let mut sb = DMatrix::<f64>::zeros(n_x, n_x);
        let mut ub = DVector::<f64>::zeros(n_u);
        let mut act = DVector::<f64>::zeros(n_u);
        for k in (0..sys.horizon()).rev() {
            let rec = &trace.steps[k];
            let g = &rec.gamma_mat;
            let (x, u, ph, cov, cov_next) = (&traj.x[k], &traj.u[k], &traj.p_hat[k], &traj.cov[k], &traj.cov[k + 1]);
            let rls = &rec.rls;

            // p_hat' = p_hat + P' G^T e
            gte.gemv_tr(1.0, g, &rls.innovation, 0.0);
            cb.ger(1.0, &pb, &gte, 1.0);
            gte_b.gemv(1.0, cov_next, &pb, 0.0);
            gb.ger(1.0, &rls.innovation, &gte_b, 0.0);
            eb.gemv(1.0, g, &gte_b, 0.0);
            pb_k.copy_from(&pb);
            // e = y - G p_hat, and y = G p + D w
            gb.ger(-1.0, &eb, ph, 1.0);
            gb.ger(1.0, &eb, p_true, 1.0);
            pb_k.gemv_tr(-1.0, g, &eb, 1.0);
            // P' = sym((P - PG X) / gamma), with cb now the adjoint of P'
            raw_b.copy_from(&cb);
            raw_b += cb.transpose();
            raw_b *= 0.5 / gamma;
            cb_k.copy_from(&raw_b);
            pgb_t.gemm(-1.0, &rls.solved, &raw_b, 0.0);
            // X = S^{-1} W with W = G P; wb starts as the adjoint of X
            wb.gemm_tr(-1.0, &rls.cov_gt, &raw_b, 0.0);
            rls.gain_chol.solve_mut(&mut wb);
            sb.fill(0.0);
            for j in 0..n_p {
                sb.ger(-1.0, &wb.column(j), &rls.solved.column(j), 1.0);
            }
            gb.gemm(1.0, &wb, cov, 1.0);
            cb_k.gemm_tr(1.0, g, &wb, 1.0);
            // S = gamma I + G PG
            for m in 0..n_x {
                gb.ger(1.0, &sb.column(m), &rls.cov_gt.column(m), 1.0);
            }
            pgb_t.gemm_tr(1.0, &sb, g, 1.0);
            // PG = P G^T
            cb_k.gemm_tr(1.0, &pgb_t, g, 1.0);
            gb.gemm(1.0, &pgb_t, cov, 1.0);
            // x' = A0 x + B0 u + r0 + G p + D w
            gb.ger(1.0, &xb, p_true, 1.0);
            xb_k.gemv_tr(1.0, sys.a(k, 0), &xb, 0.0);
            ub.gemv_tr(1.0, sys.b(k, 0), &xb, 0.0);
            // G[:, j-1] = A_j x + B_j u + r_j
            for j in 1..=n_p {
                let col = gb.column(j - 1);
                xb_k.gemv_tr(1.0, sys.a(k, j), &col, 1.0);
                ub.gemv_tr(1.0, sys.b(k, j), &col, 1.0);
            }
            // stage cost
            if cost_weight != 0.0 {
                xb_k.gemv(2.0 * cost_weight, &self.cost.q[k], x, 1.0);
                ub.gemv(2.0 * cost_weight, &self.cost.r[k], u, 1.0);
            }
            // u = sum_j c_j (v_j + L_j x), c_0 = 1, c_j = p_hat_j
            for j in 0..=n_p {
                let c = if j == 0 { 1.0 } else { ph[j - 1] };
                let v = &policy.feedforward[k][j];
                let l = &policy.feedback[k][j];
                for a in 0..n_u {
                    let cu = c * ub[a];
                    grad[lay.feedforward_index(k, j, a)] += cu;
                    for b in 0..n_x {
                        grad[lay.feedback_index(k, j, a, b)] += cu * x[b];
                    }
                }
                if c != 0.0 {
                    xb_k.gemv_tr(c, l, &ub, 1.0);
                }
                if j >= 1 {
                    act.copy_from(v);
                    act.gemv(1.0, l, x, 1.0);
                    pb_k[j - 1] += ub.dot(&act);
                }
            }
            std::mem::swap(&mut xb, &mut xb_k);
            std::mem::swap(&mut pb, &mut pb_k);
            std::mem::swap(&mut cb, &mut cb_k);
        }
        grad
    }
}

/// Margins by constraint row, in the order of the constraint vector.
impl TerminalTarget {
    pub fn row_margins(&self) -> Vec<f64> {
        let mu = self.delta_mu.iter();
        let sigma = self.delta_sigma.iter();
        mu.clone().chain(mu).chain(sigma.clone()).chain(sigma).copied().collect()
    }
}

/// The solver sees every constraint row divided by its margin, so all rows
/// are O(1) near the boundary. The feasible set is unchanged.
impl ConstrainedProblem for SaaProblem {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }

    fn num_constraints(&self) -> usize {
        self.target.num_constraints()
    }

    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = SaaProblem::evaluate(self, z)?;
        let scaled = e.constraints.iter().zip(self.target.row_margins()).map(|(c, s)| c / s).collect();
        Ok((e.objective, scaled))
    }

    fn evaluate_with_gradient(
        &self,
        z: &[f64],
        weights: &dyn Fn(f64, &[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (policy, slack, traces) = self.forward(z, true)?;
        let eval = self.values(&slack, &traces);
        if !eval.objective.is_finite() || !linalg::all_finite(&eval.constraints) {
            return Err(Error::NonFinite("SAA objective or constraints".into()));
        }
        let margins = self.target.row_margins();
        let scaled: Vec<f64> = eval.constraints.iter().zip(&margins).map(|(c, s)| c / s).collect();
        let (w0, w) = weights(eval.objective, &scaled);
        let w: Vec<f64> = w.iter().zip(&margins).map(|(w, s)| w / s).collect();
        let g = self.gradient_from_traces(&policy, &slack, &traces, w0, &w)?;
        Ok((eval.objective, scaled, g))
    }

    fn constraint_jacobian(&self, z: &[f64]) -> Option<DMatrix<f64>> {
        let (_, mut jac) = self.eval_constraints(z).ok()?;
        for (r, s) in self.target.row_margins().iter().enumerate() {
            jac.row_mut(r).scale_mut(1.0 / s);
        }
        Some(jac)
    }

    /// Block-diagonal inverse-Hessian shape over each step's gains: the
    /// Kronecker product of the inverse control curvature (stage cost plus
    /// downstream state cost along the mean closed loop) and the inverse
    /// second moment of the policy features `p_hat^j [1; x_k]` across
    /// scenarios. Early controls act through long integrator chains and
    /// feedforward and feedback directions are nearly collinear when the state
    /// spread is small, so the raw Hessian is badly scaled.
    fn preconditioner(&self, z: &[f64]) -> Option<BlockPreconditioner> {
        const RIDGE: f64 = 1e-8;
        let (policy, _, traces) = self.forward(z, false).ok()?;
        let lay = self.layout;
        let m = traces.len() as f64;
        let blocks: Vec<usize> = (0..=lay.n_p)
            .filter(|&j| self.free[lay.feedforward_index(0, j, 0)])
            .collect();
        let width = blocks.len() * (1 + lay.n_x);

        // Mean closed loop and input matrices.
        let mean_p = self.scenarios.p.iter().fold(DVector::zeros(lay.n_p), |acc, p| acc + p) / m;
        let mut closed = Vec::with_capacity(lay.horizon);
        let mut input = Vec::with_capacity(lay.horizon);
        for k in 0..lay.horizon {
            let mut a = self.sys.a(k, 0).clone();
            let mut b = self.sys.b(k, 0).clone();
            for j in 1..=lay.n_p {
                a += self.sys.a(k, j) * mean_p[j - 1];
                b += self.sys.b(k, j) * mean_p[j - 1];
            }
            let mut gain = DMatrix::zeros(lay.n_u, lay.n_x);
            for tr in &traces {
                gain += &policy.feedback[k][0];
                for j in 1..=lay.n_p {
                    gain += &policy.feedback[k][j] * tr.traj.p_hat[k][j - 1];
                }
            }
            gain /= m;
            closed.push(a + &b * gain);
            input.push(b);
        }
        let q_scale = self.cost.q.iter().map(|q| q.amax()).fold(0.0, f64::max).max(1e-12);

        let mut out = BlockPreconditioner::new();
        for k in 0..lay.horizon {
            let mut curv = self.cost.r[k].clone();
            let mut sens = input[k].clone();
            for t in k + 1..=lay.horizon {
                let weight = if t < lay.horizon { &self.cost.q[t] * 1.0 } else { DMatrix::identity(lay.n_x, lay.n_x) * q_scale };
                curv += sens.transpose() * weight * &sens;
                if t < lay.horizon {
                    sens = &closed[t] * sens;
                }
            }
            let curv_inv = linalg::symmetrize(&curv).cholesky()?.inverse();

            let mut gram = DMatrix::zeros(width, width);
            let mut phi = DVector::zeros(width);
            for tr in &traces {
                let x = &tr.traj.x[k];
                let p = &tr.traj.p_hat[k];
                for (slot, &j) in blocks.iter().enumerate() {
                    let c = if j == 0 { 1.0 } else { p[j - 1] };
                    let o = slot * (1 + lay.n_x);
                    phi[o] = c;
                    for b in 0..lay.n_x {
                        phi[o + 1 + b] = c * x[b];
                    }
                }
                gram.ger(1.0, &phi, &phi, 1.0);
            }
            gram /= m;
            let ridge = RIDGE * gram.trace() / width as f64 + 1e-12;
            for d in 0..width {
                gram[(d, d)] += ridge;
            }
            let gram_inv = gram.cholesky()?.inverse();

            let mut idx = Vec::with_capacity(lay.n_u * width);
            for a in 0..lay.n_u {
                for &j in &blocks {
                    idx.push(lay.feedforward_index(k, j, a));
                    idx.extend((0..lay.n_x).map(|b| lay.feedback_index(k, j, a, b)));
                }
            }
            out.push(idx, curv_inv.kronecker(&gram_inv) * 0.5).ok()?;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialStateDistribution, NoiseModel, ParameterPrior, PriorFamily};
    use crate::scenario::{draw_scenarios, rollout_dual, saa_cost};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, horizon: usize, m: usize, formulation: Formulation) -> SaaProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r, c, s: f64| DMatrix::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0));
        let a = vec![DMatrix::identity(2, 2) + mat(2, 2, 0.2), mat(2, 2, 0.2)];
        let b = vec![mat(2, 1, 0.5), mat(2, 1, 1.0)];
        let r = vec![mat(2, 1, 0.2).column(0).into_owned(), mat(2, 1, 0.2).column(0).into_owned()];
        let d = mat(2, 2, 0.1);
        let sys = ParametricAffineSystem::time_invariant(horizon, a, b, r, d).unwrap();
        let prior = ParameterPrior::new(PriorFamily::Gaussian {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::from_element(1, 1, 0.09),
        })
        .unwrap();
        let init = InitialStateDistribution::gaussian(DVector::from_vec(vec![1.0, -0.5]), DMatrix::identity(2, 2) * 0.05).unwrap();
        let scen = draw_scenarios(&sys, &prior, &init, NoiseModel::Gaussian, m, seed).unwrap();
        let cost = StageCost::time_invariant(horizon, DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.5).unwrap();
        let target = TerminalTarget::with_default_margins(DVector::zeros(2), DMatrix::identity(2, 2) * 0.1).unwrap();
        SaaProblem::new(sys, cost, target, 1.0, scen, formulation).unwrap().specialize()
    }

    fn random_z(prob: &SaaProblem, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..prob.layout().len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        prob.project(&z)
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, z: &[f64], i: usize) -> f64 {
        let h = 1e-5 * z[i].abs().max(1.0);
        let mut hi = z.to_vec();
        hi[i] += h;
        let mut lo = z.to_vec();
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, scale: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn pack_unpack_round_trip_and_zero() {
        let prob = instance(1, 3, 2, Formulation::AdaptiveDual);
        let lay = prob.layout();
        assert_eq!(lay.len(), 3 * 2 * (1 + 2) + 4);
        let z = random_z(&prob, 2);
        let (pol, v) = lay.unpack(&z).unwrap();
        assert_eq!(lay.pack(&pol, &v).unwrap(), z);
        let (pol0, v0) = lay.unpack(&vec![0.0; lay.len()]).unwrap();
        assert_eq!(pol0, DualAffinePolicy::zeros(3, 2, 1, 1));
        assert_eq!(v0, DMatrix::zeros(2, 2));
        assert!(lay.unpack(&z[1..]).is_err());
    }

    #[test]
    fn each_coordinate_moves_one_gain() {
        let prob = instance(1, 2, 2, Formulation::AdaptiveDual);
        let lay = prob.layout();
        let base = vec![0.0; lay.len()];
        let (p0, v0) = lay.unpack(&base).unwrap();
        for idx in 0..lay.len() {
            let mut z = base.clone();
            z[idx] = 1.0;
            let (p, v) = lay.unpack(&z).unwrap();
            let mut changed = 0;
            for k in 0..2 {
                for j in 0..2 {
                    changed += (&p.feedforward[k][j] - &p0.feedforward[k][j]).iter().filter(|e| **e != 0.0).count();
                    changed += (&p.feedback[k][j] - &p0.feedback[k][j]).iter().filter(|e| **e != 0.0).count();
                }
            }
            changed += (&v - &v0).iter().filter(|e| **e != 0.0).count();
            assert_eq!(changed, 1, "coordinate {idx}");
        }
        assert_eq!(lay.feedback_index(1, 1, 0, 1), (1 * 2 + 1) * 3 + 1 + 1);
        assert_eq!(lay.slack_index(1, 0), lay.gains_len() + 2);
    }

    #[test]
    fn objective_equals_independent_rollout_cost() {
        let prob = instance(3, 4, 5, Formulation::AdaptiveDual);
        let z = random_z(&prob, 4);
        let (f, _) = prob.eval_objective(&z).unwrap();
        let (pol, _) = prob.layout().unpack(&z).unwrap();
        let traj = rollout_dual(&prob.sys, &pol, &prob.scenarios, prob.gamma).unwrap();
        assert_eq!(f, saa_cost(&traj, &prob.cost).unwrap());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for (seed, gamma) in [(5u64, 1.0), (6, 0.9)] {
            let mut prob = instance(seed, 3, 4, Formulation::AdaptiveDual);
            prob.gamma = gamma;
            let z = random_z(&prob, seed + 100);
            let (f, g) = prob.eval_objective(&z).unwrap();
            for i in 0..z.len() {
                let fd = central_difference(|z| prob.evaluate(z).unwrap().objective, &z, i);
                assert!(close(g[i], fd, 1e-3 * f.abs().max(1.0)), "coord {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        let prob = instance(7, 3, 4, Formulation::AdaptiveDual);
        let z = random_z(&prob, 107);
        let (c, jac) = prob.eval_constraints(&z).unwrap();
        assert_eq!(c.len(), 2 * 2 + 2 * 4);
        for r in 0..c.len() {
            for i in 0..z.len() {
                let fd = central_difference(|z| prob.evaluate(z).unwrap().constraints[r], &z, i);
                assert!(close(jac[(r, i)], fd, 1e-3), "row {r} coord {i}: {} vs {fd}", jac[(r, i)]);
            }
        }
    }

    #[test]
    fn weighted_gradient_is_jacobian_combination() {
        let prob = instance(8, 3, 6, Formulation::AdaptiveDual);
        let z = random_z(&prob, 108);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..prob.target.num_constraints()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (_, g) = prob.weighted_gradient(&z, 0.7, &w).unwrap();
        let (_, gf) = prob.eval_objective(&z).unwrap();
        let (_, jac) = prob.eval_constraints(&z).unwrap();
        for i in 0..z.len() {
            let expected = 0.7 * gf[i] + (0..w.len()).map(|r| w[r] * jac[(r, i)]).sum::<f64>();
            assert!((g[i] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn static_formulations_mask_adaptive_blocks() {
        for form in [Formulation::StaticRobust, Formulation::CertaintyEquivalence] {
            let prob = instance(10, 3, 4, form);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let z: Vec<f64> = (0..prob.layout().len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let (_, g) = prob.eval_objective(&z).unwrap();
            let (_, jac) = prob.eval_constraints(&z).unwrap();
            for i in 0..z.len() {
                if prob.layout().is_adaptive(i) {
                    assert!(!prob.is_free(i));
                    assert_eq!(g[i], 0.0);
                    assert!(jac.column(i).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn certainty_equivalence_with_point_prior_is_full_information_at_mean() {
        let base = instance(12, 3, 4, Formulation::AdaptiveDual);
        let mut scen = base.scenarios.clone();
        scen.prior_cov = DMatrix::zeros(1, 1);
        let ce = SaaProblem::new(base.sys.clone(), base.cost.clone(), base.target.clone(), 1.0, scen.clone(), Formulation::CertaintyEquivalence)
            .unwrap()
            .specialize();
        let fi = SaaProblem::new(
            base.sys.clone(),
            base.cost.clone(),
            base.target.clone(),
            1.0,
            scen.clone(),
            Formulation::FullInformation(scen.prior_mean.clone()),
        )
        .unwrap()
        .specialize();
        let z = random_z(&ce, 13);
        assert_eq!(ce.evaluate(&z).unwrap(), fi.evaluate(&z).unwrap());
    }

    #[test]
    fn static_robust_equals_dual_at_embedded_point() {
        let robust = instance(14, 4, 5, Formulation::StaticRobust);
        let mut dual = robust.clone();
        dual.formulation = Formulation::AdaptiveDual;
        let dual = dual.specialize();
        let z = random_z(&robust, 15);
        let (pol, v) = robust.layout().unpack(&z).unwrap();
        let embedded = pol.nominal_part().embed_as_dual(1);
        let z_dual = dual.layout().pack(&embedded, &v).unwrap();
        assert_eq!(robust.evaluate(&z).unwrap(), dual.evaluate(&z_dual).unwrap());
    }

    #[test]
    fn exact_slack_is_strictly_feasible() {
        // Point prior, no noise, zero spread: all terminal states coincide.
        let base = instance(16, 3, 3, Formulation::AdaptiveDual);
        let mut sys_d = base.sys.clone();
        let zero_d = ParametricAffineSystem::time_invariant(
            3,
            (0..2).map(|j| sys_d.a(0, j).clone()).collect(),
            (0..2).map(|j| sys_d.b(0, j).clone()).collect(),
            (0..2).map(|j| sys_d.r(0, j).clone()).collect(),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        sys_d = zero_d;
        let mut scen = base.scenarios.clone();
        scen.x0 = vec![DVector::from_vec(vec![0.2, 0.1]); 3];
        scen.p = vec![DVector::from_element(1, 1.0); 3];
        let pol = DualAffinePolicy::zeros(3, 2, 1, 1);
        let traj = rollout_dual(&sys_d, &pol, &scen, 1.0).unwrap();
        let mu_f = traj.scenarios[0].terminal().clone();
        let sigma_f = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.2]);
        let target = TerminalTarget::with_default_margins(mu_f, sigma_f.clone()).unwrap();
        let prob = SaaProblem::new(sys_d, base.cost.clone(), target.clone(), 1.0, scen, Formulation::AdaptiveDual).unwrap();
        let z = prob.layout().pack(&pol, &linalg::psd_sqrt(&sigma_f)).unwrap();
        let c = prob.evaluate(&z).unwrap().constraints;
        let expected: Vec<f64> = target
            .delta_mu
            .iter()
            .chain(target.delta_mu.iter())
            .chain(target.delta_sigma.iter())
            .chain(target.delta_sigma.iter())
            .map(|d| -d)
            .collect();
        for (ci, ei) in c.iter().zip(&expected) {
            assert!((ci - ei).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_policy_is_stationary_for_control_cost() {
        // Q = 0, zero gains and feedforward: u = 0 everywhere, the R-term and
        // its gradient vanish.
        let mut prob = instance(17, 3, 4, Formulation::AdaptiveDual);
        prob.cost = StageCost::time_invariant(3, DMatrix::zeros(2, 2), DMatrix::identity(1, 1)).unwrap();
        let z = vec![0.0; prob.layout().len()];
        let (f, g) = prob.eval_objective(&z).unwrap();
        assert_eq!(f, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn slack_outer_product_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let v = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-2.0..2.0));
            assert!(linalg::min_eigenvalue(&(&v * v.transpose())) >= -1e-10);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_reports_pivot() {
        let prob = instance(19, 3, 6, Formulation::AdaptiveDual);
        let z = random_z(&prob, 20);
        let a = prob.evaluate(&z).unwrap();
        let b = prob.evaluate(&z).unwrap();
        assert_eq!(a, b);
        assert!(a.min_pivot >= prob.gamma);
    }
}
