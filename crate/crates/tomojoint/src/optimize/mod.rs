//! Unconstrained minimizers shared by every pipeline: L-BFGS and nonlinear
//! conjugate gradient over a common line search and stopping contract.
//!
//! Solvers are single-threaded orchestrators; parallelism belongs to the
//! objective callbacks. Given identical callbacks and options the iterate
//! sequence is deterministic.

mod cg;
mod lbfgs;
mod line_search;

pub use cg::nonlinear_cg;
pub use lbfgs::lbfgs;
pub use line_search::{line_search, LineSearchKind};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Solver selection for callers that take it from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Lbfgs,
    NonlinearCg,
}

/// Run the selected solver.
pub fn minimize(
    solver: Solver,
    obj: &mut dyn Objective,
    x0: &[f64],
    opts: &OptimizerOptions,
) -> Result<Solution> {
    match solver {
        Solver::Lbfgs => lbfgs(obj, x0, opts),
        Solver::NonlinearCg => nonlinear_cg(obj, x0, opts),
    }
}

/// Objective callback: value at x, with the gradient written into `grad`
/// when requested. Value-only calls let backtracking skip gradient work.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> Result<f64>,
{
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        self(x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop when the gradient inf-norm falls below grad_tol * (1 + |f|).
    pub grad_tol: f64,
    /// Stop when the objective change falls below f_tol * (1 + |f|).
    pub f_tol: f64,
    /// L-BFGS memory; ignored by the CG solver.
    pub history: usize,
    pub line_search: LineSearchKind,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_ls_trials: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 100,
            grad_tol: 1e-6,
            f_tol: 1e-9,
            history: 10,
            line_search: LineSearchKind::StrongWolfe,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_ls_trials: 40,
        }
    }
}

impl OptimizerOptions {
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0 && self.f_tol >= 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be nonnegative".into(),
            ));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidParameter(
                "wolfe constants need 0 < c1 < c2 < 1".into(),
            ));
        }
        if self.history < 1 || self.max_ls_trials < 1 {
            return Err(Error::InvalidParameter(
                "history and max_ls_trials must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    GradTol,
    FTol,
    MaxIters,
    LineSearchFailure,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TerminationReason::GradTol => "grad_tol",
            TerminationReason::FTol => "f_tol",
            TerminationReason::MaxIters => "max_iters",
            TerminationReason::LineSearchFailure => "line_search_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    /// Gradient inf-norm at this iterate.
    pub grad_norm: f64,
    /// Step length that produced this iterate; 0 for the start point.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub termination: TerminationReason,
    /// Total objective evaluations, line-search trials included.
    pub evals: usize,
}

impl OptimizerTrace {
    pub fn final_value(&self) -> f64 {
        self.records.last().map(|r| r.value).unwrap_or(f64::NAN)
    }

    pub fn iterations(&self) -> usize {
        self.records.last().map(|r| r.iteration).unwrap_or(0)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("iteration,value,grad_norm,step\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                r.iteration, r.value, r.grad_norm, r.step
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: OptimizerTrace,
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn grad_converged(g_inf: f64, f: f64, tol: f64) -> bool {
    g_inf <= tol * (1.0 + f.abs())
}

pub(crate) fn value_converged(prev: f64, new: f64, tol: f64) -> bool {
    (prev - new).abs() <= tol * (1.0 + new.abs())
}

pub(crate) struct LineOutcome {
    pub tau: f64,
    pub value: f64,
    /// True when the trial gradient buffer holds the gradient at the
    /// accepted point.
    pub have_grad: bool,
}

/// Run the configured line search from x along descent direction d.
/// On success the trial buffers hold the accepted point (and gradient for
/// the Wolfe search). Counts evaluations into `evals`.
pub(crate) fn search_along(
    obj: &mut dyn Objective,
    opts: &OptimizerOptions,
    x: &[f64],
    d: &[f64],
    f0: f64,
    slope0: f64,
    tau0: f64,
    xt: &mut [f64],
    gt: &mut [f64],
    evals: &mut usize,
) -> Result<LineOutcome> {
    debug_assert!(slope0 < 0.0);
    match opts.line_search {
        LineSearchKind::StrongWolfe => {
            let mut last_tau = f64::NAN;
            let (tau, value) = line_search::strong_wolfe(
                |tau| {
                    for ((t, &xi), &di) in xt.iter_mut().zip(x).zip(d) {
                        *t = xi + tau * di;
                    }
                    *evals += 1;
                    let v = obj.eval(xt, Some(gt))?;
                    last_tau = tau;
                    Ok((v, dot(gt, d)))
                },
                f0,
                slope0,
                tau0,
                opts.wolfe_c1,
                opts.wolfe_c2,
                opts.max_ls_trials,
            )?;
            // The search accepts the point it evaluated last, so the
            // buffers are already positioned there.
            debug_assert_eq!(tau, last_tau);
            Ok(LineOutcome { tau, value, have_grad: true })
        }
        LineSearchKind::Backtracking => {
            let (tau, value) = line_search::backtracking(
                |tau| {
                    for ((t, &xi), &di) in xt.iter_mut().zip(x).zip(d) {
                        *t = xi + tau * di;
                    }
                    *evals += 1;
                    obj.eval(xt, None)
                },
                f0,
                slope0,
                tau0,
                opts.wolfe_c1,
                opts.max_ls_trials,
            )?;
            for ((t, &xi), &di) in xt.iter_mut().zip(x).zip(d) {
                *t = xi + tau * di;
            }
            Ok(LineOutcome { tau, value, have_grad: false })
        }
    }
}
