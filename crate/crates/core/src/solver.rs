//! Augmented-Lagrangian solver for `min f(z) s.t. c(z) <= 0`, with a
//! limited-memory quasi-Newton inner minimizer.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Callbacks for a smooth inequality-constrained problem.
pub trait ConstrainedProblem: Sync {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;

    /// Objective and constraint values.
    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Objective, constraints and the gradient of `w0 f + sum_r w_r c_r`
    /// where `(w0, w) = weights(f, c)`.
    fn evaluate_with_gradient(
        &self,
        z: &[f64],
        weights: &dyn Fn(f64, &[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>, Vec<f64>)>;

    /// Optional initial inverse-Hessian shape for the inner minimizer,
    /// refreshed every few inner iterations.
    fn preconditioner(&self, _z: &[f64]) -> Option<BlockPreconditioner> {
        None
    }

    /// Optional constraint Jacobian (rows = constraints), used to add the
    /// penalty curvature of active rows to the preconditioner.
    fn constraint_jacobian(&self, _z: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Symmetric positive definite blocks over disjoint coordinate sets, applied
/// as the initial inverse Hessian of the limited-memory recursion.
/// Coordinates outside every block are left unscaled.
#[derive(Debug, Clone, Default)]
pub struct BlockPreconditioner {
    blocks: Vec<(Vec<usize>, DMatrix<f64>)>,
}

impl BlockPreconditioner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a block given by its inverse-Hessian approximation.
    pub fn push(&mut self, indices: Vec<usize>, inverse: DMatrix<f64>) -> Result<()> {
        if inverse.nrows() != indices.len() || inverse.ncols() != indices.len() {
            return Err(Error::dim("preconditioner block", indices.len(), inverse.nrows()));
        }
        self.blocks.push((indices, inverse));
        Ok(())
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (idx, inv) in &self.blocks {
            let local = DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
            let scaled = inv * local;
            for (&i, val) in idx.iter().zip(scaled.iter()) {
                out[i] = *val;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Bound on the maximum constraint violation `max(0, max_r c_r)`.
    pub constraint_tolerance: f64,
    /// Bound on the Lagrangian gradient infinity norm, relative to `max(1, |f|)`.
    pub gradient_tolerance: f64,
    pub multiplier_bound: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 30,
            max_inner_iterations: 500,
            initial_penalty: 10.0,
            penalty_growth: 5.0,
            max_penalty: 1e8,
            constraint_tolerance: 1e-6,
            gradient_tolerance: 1e-6,
            multiplier_bound: 1e12,
            memory: 100,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_penalty,
            self.max_penalty,
            self.constraint_tolerance,
            self.gradient_tolerance,
            self.multiplier_bound,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.max_outer_iterations == 0
            || self.max_inner_iterations == 0
            || self.memory == 0
        {
            return Err(Error::invalid("solver options", "all options must be positive"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("solver options", "penalty growth must exceed 1"));
        }
        if self.max_penalty < self.initial_penalty {
            return Err(Error::invalid("solver options", "max penalty below initial penalty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

impl SolverStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::IterationLimit => "iteration_limit",
        }
    }
}

/// One outer iteration of the augmented-Lagrangian loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub penalty: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub lagrangian_gradient: f64,
    pub inner_iterations: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub z: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
    pub status: SolverStatus,
    pub objective: f64,
    pub max_violation: f64,
    /// Infinity norm of `grad f + sum_r lambda_r grad c_r` at `z`.
    pub lagrangian_gradient: f64,
    /// Largest multiplier times slack over the constraint rows.
    pub complementarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub evaluations: usize,
    pub seconds: f64,
    pub history: Vec<OuterRecord>,
}

/// Initial inverse-Hessian shape of the inner minimizer: the problem's block
/// preconditioner `P`, corrected by Woodbury for the penalty curvature
/// `rho J_A^T J_A` of the active constraint rows.
struct Shape {
    block: Option<BlockPreconditioner>,
    /// `P J_A^T` and the factor of `I / rho + J_A P J_A^T`.
    correction: Option<(DMatrix<f64>, Cholesky<f64, Dyn>)>,
}

impl Shape {
    fn build<P: ConstrainedProblem + ?Sized>(problem: &P, point: &Point, lambda: &[f64], rho: f64) -> Self {
        let z = point.z.as_slice();
        let block = problem.preconditioner(z);
        let apply = |v: &DVector<f64>| block.as_ref().map_or_else(|| v.clone(), |b| b.apply(v));
        let active: Vec<usize> = (0..lambda.len()).filter(|&r| lambda[r] + rho * point.c[r] > 0.0).collect();
        let correction = if active.is_empty() {
            None
        } else {
            problem.constraint_jacobian(z).and_then(|jac| {
                let n = z.len();
                let mut pjt = DMatrix::zeros(n, active.len());
                for (col, &r) in active.iter().enumerate() {
                    let row = jac.row(r).transpose();
                    pjt.set_column(col, &apply(&row));
                }
                let mut inner = DMatrix::identity(active.len(), active.len()) / rho;
                for (a, &r) in active.iter().enumerate() {
                    for b in 0..active.len() {
                        inner[(a, b)] += jac.row(r).dot(&pjt.column(b).transpose());
                    }
                }
                let chol = crate::linalg::symmetrize(&inner).cholesky()?;
                Some((pjt, chol))
            })
        };
        Self { block, correction }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = self.block.as_ref().map_or_else(|| v.clone(), |b| b.apply(v));
        if let Some((pjt, chol)) = &self.correction {
            let coef = chol.solve(&(pjt.transpose() * v));
            out -= pjt * coef;
        }
        out
    }
}

/// Warm-start data beyond the initial point.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub multipliers: Option<Vec<f64>>,
    pub penalty: Option<f64>,
}

pub fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0f64, |m, &v| m.max(v))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Largest `lambda_r * max(0, -c_r)`: multipliers on strictly inactive rows.
fn complementarity(lambda: &[f64], c: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(c)
        .fold(0.0f64, |m, (&l, &cr)| m.max(l * (-cr).max(0.0)))
}

fn shifted(lambda: &[f64], rho: f64, c: &[f64]) -> Vec<f64> {
    lambda.iter().zip(c).map(|(&l, &cr)| (l + rho * cr).max(0.0)).collect()
}

fn merit(f: f64, c: &[f64], lambda: &[f64], rho: f64) -> f64 {
    let pen: f64 = lambda
        .iter()
        .zip(c)
        .map(|(&l, &cr)| {
            let s = (l + rho * cr).max(0.0);
            s * s - l * l
        })
        .sum();
    f + pen / (2.0 * rho)
}

#[derive(Clone)]
struct Point {
    z: DVector<f64>,
    f: f64,
    c: Vec<f64>,
    /// Merit gradient at the current multipliers and penalty.
    g: DVector<f64>,
    phi: f64,
}

struct Counters {
    evaluations: usize,
}

fn eval_point<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    z: DVector<f64>,
    lambda: &[f64],
    rho: f64,
    counters: &mut Counters,
) -> Result<Point> {
    counters.evaluations += 1;
    let weights = |_: f64, c: &[f64]| (1.0, shifted(lambda, rho, c));
    let (f, c, g) = problem.evaluate_with_gradient(z.as_slice(), &weights)?;
    if !f.is_finite() || c.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective, constraints or gradient".into()));
    }
    let phi = merit(f, &c, lambda, rho);
    Ok(Point {
        z,
        f,
        c,
        g: DVector::from_vec(g),
        phi,
    })
}

/// Curvature pairs `(s, y, 1 / s'y)`, oldest first.
type Memory = VecDeque<(DVector<f64>, DVector<f64>, f64)>;

/// Minimizes the augmented Lagrangian at fixed multipliers and penalty.
/// `mem` carries curvature pairs over from the previous subproblem.
fn minimize_inner<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    start: Point,
    lambda: &[f64],
    rho: f64,
    tol: f64,
    opts: &SolverOptions,
    mem: &mut Memory,
    counters: &mut Counters,
) -> (Point, usize) {
    let mut cur = start;
    let mut shape = None;
    let mut stalled = 0;
    let mut iters = 0;
    while iters < opts.max_inner_iterations {
        if inf_norm(cur.g.as_slice()) <= tol {
            break;
        }
        if iters % PRECONDITIONER_REFRESH == 0 {
            shape = Some(Shape::build(problem, &cur, lambda, rho));
        }
        iters += 1;
        let mut dir = two_loop(&cur.g, &mem, shape.as_ref());
        if !(cur.g.dot(&dir) < -1e-12 * cur.g.norm() * dir.norm()) {
            mem.clear();
            dir = -&cur.g;
        }
        let step = if mem.is_empty() {
            (1.0 / inf_norm(dir.as_slice())).min(1.0)
        } else {
            1.0
        };
        let mut eval = |t: f64| eval_point(problem, &cur.z + &dir * t, lambda, rho, counters).ok();
        let Some(next) = wolfe_search(&cur, &dir, step, &mut eval) else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let s = &next.z - &cur.z;
        let y = &next.g - &cur.g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let decrease = cur.phi - next.phi;
        if decrease <= 1e-15 * cur.phi.abs().max(1.0) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        cur = next;
        if stalled >= 5 {
            break;
        }
    }
    (cur, iters)
}

const PRECONDITIONER_REFRESH: usize = 10;
const ARMIJO: f64 = 1e-4;
const CURVATURE: f64 = 0.9;
const MAX_TRIALS: usize = 40;

/// Bracketing line search for the weak Wolfe conditions along `dir`.
/// Failed evaluations count as infinitely bad trials. Falls back to the best
/// trial that satisfies sufficient decrease; `None` if there is none.
fn wolfe_search(
    cur: &Point,
    dir: &DVector<f64>,
    first: f64,
    eval: &mut dyn FnMut(f64) -> Option<Point>,
) -> Option<Point> {
    let phi0 = cur.phi;
    let slope0 = cur.g.dot(dir);
    let armijo = |t: f64, p: &Point| p.phi <= phi0 + ARMIJO * t * slope0;
    let mut best: Option<(f64, Point)> = None;
    let keep = |t: f64, p: &Point, best: &mut Option<(f64, Point)>| {
        if armijo(t, p) && best.as_ref().is_none_or(|(_, b)| p.phi < b.phi) {
            *best = Some((t, p.clone()));
        }
    };
    // (step, value, slope) at the low end of the bracket.
    let mut lo = (0.0, phi0, slope0);
    let mut hi: Option<(f64, f64)> = None;
    let mut t = first;
    for _ in 0..MAX_TRIALS {
        let Some(p) = eval(t) else {
            hi = Some((t, f64::INFINITY));
            t = lo.0 + 0.5 * (t - lo.0);
            continue;
        };
        keep(t, &p, &mut best);
        let slope = p.g.dot(dir);
        if !armijo(t, &p) || p.phi >= lo.1 {
            hi = Some((t, p.phi));
        } else {
            if slope >= CURVATURE * slope0 {
                return Some(p);
            }
            lo = (t, p.phi, slope);
        }
        t = match hi {
            None => 2.0 * t,
            Some((h, fh)) => {
                let width = h - lo.0;
                if width.abs() <= 1e-16 * lo.0.abs().max(1.0) {
                    break;
                }
                // Minimizer of the quadratic through (lo, f_lo, slope_lo) and (h, f_h).
                let denom = 2.0 * (fh - lo.1 - lo.2 * width);
                let frac = if fh.is_finite() && denom > 0.0 {
                    (-lo.2 * width * width / denom) / width
                } else {
                    0.5
                };
                lo.0 + frac.clamp(0.1, 0.9) * width
            }
        };
    }
    best.map(|(_, p)| p)
}

fn two_loop(
    g: &DVector<f64>,
    mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    shape: Option<&Shape>,
) -> DVector<f64> {
    let shape = |v: &DVector<f64>| shape.map_or_else(|| v.clone(), |p| p.apply(v));
    let mut q = g.clone();
    let mut alpha = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alpha.push(a);
    }
    q = match mem.back() {
        Some((s, y, _)) => {
            let hy = shape(y);
            shape(&q) * (s.dot(y) / y.dot(&hy))
        }
        None => shape(&q),
    };
    for ((s, y, rho), a) in mem.iter().zip(alpha.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

/// Rows within this distance of their bound take part in the multiplier
/// estimate.
const ACTIVE_BAND: f64 = 1e-4;

/// Projected stationarity at `point`: the Lagrangian gradient infinity norm
/// and complementarity under least-squares nonnegative multipliers on the
/// nearly active rows. Independent of the penalty, so it does not inherit the
/// line search's resolution limit along stiff constraint normals. `None` when
/// the problem supplies no Jacobian.
fn stationarity<P: ConstrainedProblem + ?Sized>(problem: &P, point: &Point, counters: &mut Counters) -> Option<(f64, f64)> {
    let z = point.z.as_slice();
    let jac = problem.constraint_jacobian(z)?;
    counters.evaluations += 1;
    let (_, _, grad) = problem
        .evaluate_with_gradient(z, &|_, c| (1.0, vec![0.0; c.len()]))
        .ok()?;
    let grad = DVector::from_vec(grad);
    let rows: Vec<usize> = (0..point.c.len()).filter(|&r| point.c[r] >= -ACTIVE_BAND).collect();
    if rows.is_empty() {
        return Some((inf_norm(grad.as_slice()), 0.0));
    }
    let mut a = DMatrix::zeros(z.len(), rows.len());
    for (col, &r) in rows.iter().enumerate() {
        a.set_column(col, &jac.row(r).transpose());
    }
    let mult = nnls(&a, &(-&grad));
    let residual = &grad + &a * &mult;
    let compl = rows
        .iter()
        .zip(mult.iter())
        .fold(0.0f64, |m, (&r, &l)| m.max(l * (-point.c[r]).max(0.0)));
    Some((inf_norm(residual.as_slice()), compl))
}

/// Nonnegative least squares `min |A x - b|, x >= 0` by the Lawson-Hanson
/// active-set method.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0);
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let mut sub = DMatrix::zeros(a.nrows(), idx.len());
        for (c, &i) in idx.iter().enumerate() {
            sub.set_column(c, &a.column(i));
        }
        let sol = sub
            .svd(true, true)
            .solve(b, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(idx.len()));
        let mut full = DVector::zeros(n);
        for (c, &i) in idx.iter().enumerate() {
            full[i] = sol[c];
        }
        full
    };
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let pick = (0..n)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let s = solve_passive(&passive);
            let blocking: Vec<usize> = (0..n).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            let alpha = blocking
                .iter()
                .map(|&i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            x += (&s - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    x
}

/// Solves `min f(z) s.t. c(z) <= 0` from `z0`.
pub fn solve<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    z0: &[f64],
    warm: &WarmStart,
    opts: &SolverOptions,
) -> Result<SolverResult> {
    opts.validate()?;
    let start = Instant::now();
    let n = problem.num_variables();
    let m = problem.num_constraints();
    if z0.len() != n {
        return Err(Error::dim("initial point", n, z0.len()));
    }
    let mut lambda = match &warm.multipliers {
        Some(l) if l.len() == m => l.iter().map(|v| v.clamp(0.0, opts.multiplier_bound)).collect(),
        Some(l) => return Err(Error::dim("initial multipliers", m, l.len())),
        None => vec![0.0; m],
    };
    let mut rho = warm
        .penalty
        .unwrap_or(opts.initial_penalty)
        .clamp(opts.initial_penalty, opts.max_penalty);
    let mut counters = Counters { evaluations: 0 };
    let wrap = |outer: usize| move |e: Error| Error::Solver {
        outer,
        source: Box::new(e),
    };

    let mut cur = eval_point(problem, DVector::from_column_slice(z0), &lambda, rho, &mut counters).map_err(wrap(0))?;
    let mut best_violation = max_violation(&cur.c);
    let mut history = Vec::new();
    let mut inner_total = 0;
    let mut at_cap: Vec<f64> = Vec::new();
    let mut status = SolverStatus::IterationLimit;
    let (mut lag_grad, mut compl) =
        stationarity(problem, &cur, &mut counters).unwrap_or((inf_norm(cur.g.as_slice()), f64::INFINITY));
    let mut prev_progress = f64::INFINITY;
    // Kept across subproblems while the penalty is unchanged.
    let mut memory = Memory::with_capacity(opts.memory);
    let mut last_accepted: Option<(Point, Vec<f64>, f64, f64)> = None;

    for outer in 0..opts.max_outer_iterations {
        let scale = cur.f.abs().max(1.0);
        // Never looser than a tenth of the current KKT residual, so a warm
        // start near a solution is not thrown away by a loose first solve.
        let kkt = lag_grad.max(max_violation(&cur.c)) / scale;
        let tol = opts.gradient_tolerance.max(0.1f64.powi(outer as i32 + 1).min(0.1 * kkt)) * scale;
        let (cand, iters) = minimize_inner(problem, cur, &lambda, rho, tol, opts, &mut memory, &mut counters);
        inner_total += iters;
        // Violation of the shifted constraints max(c, -lambda / rho): it also
        // measures complementarity of the old multipliers.
        let progress = lambda
            .iter()
            .zip(&cand.c)
            .fold(0.0f64, |m, (&l, &c)| m.max(c.max(-l / rho).abs()));
        lambda = shifted(&lambda, rho, &cand.c)
            .into_iter()
            .map(|l| l.min(opts.multiplier_bound))
            .collect();
        cur = eval_point(problem, cand.z, &lambda, rho, &mut counters).map_err(wrap(outer))?;
        (lag_grad, compl) = match stationarity(problem, &cur, &mut counters) {
            Some(m) => m,
            // The merit gradient at the old multipliers is the Lagrangian
            // gradient at the updated ones.
            None => (inf_norm(cand.g.as_slice()), complementarity(&lambda, &cur.c)),
        };
        let violation = max_violation(&cur.c);
        let accepted = violation <= best_violation.max(opts.constraint_tolerance) + 1e-12;
        if accepted {
            best_violation = violation;
            last_accepted = Some((cur.clone(), lambda.clone(), lag_grad, compl));
        }
        history.push(OuterRecord {
            penalty: rho,
            objective: cur.f,
            max_violation: violation,
            lagrangian_gradient: lag_grad,
            inner_iterations: iters,
            accepted,
        });
        let scale = cur.f.abs().max(1.0);
        if violation <= opts.constraint_tolerance
            && lag_grad <= opts.gradient_tolerance * scale
            && compl <= opts.gradient_tolerance * scale
        {
            status = SolverStatus::Optimal;
            break;
        }
        if rho >= opts.max_penalty {
            at_cap.push(violation);
            if at_cap.len() > 5 {
                let old = at_cap[at_cap.len() - 6];
                if violation > opts.constraint_tolerance && old - violation < 0.01 * old {
                    status = SolverStatus::Infeasible;
                    break;
                }
            }
        }
        if progress > opts.constraint_tolerance && progress > 0.5 * prev_progress {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
            memory.clear();
            cur = eval_point(problem, cur.z, &lambda, rho, &mut counters).map_err(wrap(outer))?;
        }
        prev_progress = progress;
    }

    // Out of iterations on a rejected step: report the last accepted point.
    if status == SolverStatus::IterationLimit && history.last().is_some_and(|h| !h.accepted) {
        if let Some(point) = last_accepted {
            (cur, lambda, lag_grad, compl) = point;
        }
    }

    Ok(SolverResult {
        max_violation: max_violation(&cur.c),
        objective: cur.f,
        z: cur.z.as_slice().to_vec(),
        multipliers: lambda,
        penalty: rho,
        status,
        lagrangian_gradient: lag_grad,
        complementarity: compl,
        outer_iterations: history.len(),
        inner_iterations: inner_total,
        evaluations: counters.evaluations,
        seconds: start.elapsed().as_secs_f64(),
        history,
    })
}

/// Writes one line per outer iteration: penalty, objective, max violation.
pub fn write_iteration_log(path: &Path, result: &SolverResult) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    writeln!(f, "outer penalty objective max_violation lagrangian_gradient inner accepted").map_err(io)?;
    for (i, r) in result.history.iter().enumerate() {
        writeln!(
            f,
            "{i} {:e} {:e} {:e} {:e} {} {}",
            r.penalty, r.objective, r.max_violation, r.lagrangian_gradient, r.inner_iterations, r.accepted
        )
        .map_err(io)?;
    }
    Ok(())
}
