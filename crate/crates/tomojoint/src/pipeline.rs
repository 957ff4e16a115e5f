//! The three end-to-end schemes and their building blocks: least-squares
//! reconstruction, SSD registration, and the sequential / iterative /
//! simultaneous joint solvers.
//!
//! Iteration budgets are fixed counts rather than tolerances so the schemes
//! compare at equal cost. The option defaults all spend a total budget of
//! 1000: sequential splits it 450 + 450 + 100, the iterative scheme runs
//! 10 sweeps of (20 + 20) reconstruction and 60 registration iterations,
//! and the simultaneous scheme derives its sweep count from the budget and
//! the 20/10 inner split.

use crate::error::{Error, Result};
use crate::metrics::MetricsSummary;
use crate::optimize::{minimize, OptimizerOptions, OptimizerTrace, Solver};
use crate::projector::{back_project, forward_project, residual_gradient, ProjectionStack};
use crate::transform::{
    fdm_transform_derivative, registration_value, registration_value_and_gradient, warp,
    warp_adjoint, weighted_param_gradient, Transform, TransformModel,
};
use crate::volume::{dot, GridSpec, Volume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// f1 <- warp(f2, zeta) before the next sweep.
    ReplaceWithWarped,
    /// f1 <- (warp(f2, zeta) + f1) / 2.
    AverageWithWarped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequentialOptions {
    /// Reconstruction iterations per volume.
    pub recon_iters: usize,
    pub register_iters: usize,
    pub model: TransformModel,
    pub solver: Solver,
    pub optimizer: OptimizerOptions,
}

/// Sub-solves inside the pipelines run on iteration budgets alone. The
/// solver's relative gradient test scales with |f|, and at projection
/// residual magnitudes (1e9 and up on clinical intensities) it would end
/// a sub-solve after a handful of iterations, starving later sweeps.
fn budget_driven() -> OptimizerOptions {
    OptimizerOptions {
        grad_tol: 0.0,
        f_tol: 0.0,
        ..OptimizerOptions::default()
    }
}

impl Default for SequentialOptions {
    fn default() -> Self {
        SequentialOptions {
            recon_iters: 450,
            register_iters: 100,
            model: TransformModel::Affine,
            solver: Solver::Lbfgs,
            optimizer: budget_driven(),
        }
    }
}

impl SequentialOptions {
    pub fn validate(&self) -> Result<()> {
        if self.recon_iters == 0 || self.register_iters == 0 {
            return Err(Error::InvalidParameter(
                "sequential iteration counts must be at least 1".into(),
            ));
        }
        self.optimizer.validate()
    }

    pub fn total_budget(&self) -> usize {
        2 * self.recon_iters + self.register_iters
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeOptions {
    /// Outer sweeps k.
    pub outer_sweeps: usize,
    /// Reconstruction iterations j spent on each volume per sweep.
    pub inner_recon_iters: usize,
    /// Registration iterations per sweep, warm-started.
    pub register_iters: usize,
    pub update_rule: UpdateRule,
    pub model: TransformModel,
    pub solver: Solver,
    pub optimizer: OptimizerOptions,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        IterativeOptions {
            outer_sweeps: 10,
            inner_recon_iters: 20,
            register_iters: 60,
            update_rule: UpdateRule::ReplaceWithWarped,
            model: TransformModel::Affine,
            solver: Solver::Lbfgs,
            optimizer: budget_driven(),
        }
    }
}

impl IterativeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.outer_sweeps == 0 || self.inner_recon_iters == 0 || self.register_iters == 0 {
            return Err(Error::InvalidParameter(
                "iterative sweep and iteration counts must be at least 1".into(),
            ));
        }
        self.optimizer.validate()
    }

    pub fn total_budget(&self) -> usize {
        self.outer_sweeps * (2 * self.inner_recon_iters + self.register_iters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimultaneousOptions {
    /// Total inner iterations to spend; the sweep count is derived from
    /// this and the inner split so the two cannot disagree.
    pub total_budget: usize,
    pub inner_f_iters: usize,
    pub inner_zeta_iters: usize,
    pub model: TransformModel,
    /// Step for the difference-quotient transform derivative (affine path).
    pub fdm_epsilon: f64,
    pub solver: Solver,
    pub optimizer: OptimizerOptions,
    /// Skip every transform update; ablation baseline.
    pub freeze_transform: bool,
    /// Clamp the volume at zero after each f sub-solve. Off by default:
    /// clamping is a projection step outside the objective, so the joint
    /// objective may rise across a sweep when it is on.
    pub clamp_nonnegative: bool,
}

impl Default for SimultaneousOptions {
    fn default() -> Self {
        SimultaneousOptions {
            total_budget: 1000,
            inner_f_iters: 20,
            inner_zeta_iters: 10,
            model: TransformModel::Affine,
            fdm_epsilon: 1e-3,
            solver: Solver::Lbfgs,
            optimizer: budget_driven(),
            freeze_transform: false,
            clamp_nonnegative: false,
        }
    }
}

impl SimultaneousOptions {
    pub fn validate(&self) -> Result<()> {
        if self.total_budget == 0 || self.inner_f_iters == 0 || self.inner_zeta_iters == 0 {
            return Err(Error::InvalidParameter(
                "simultaneous budget and inner iteration counts must be at least 1".into(),
            ));
        }
        if !(self.fdm_epsilon.is_finite() && self.fdm_epsilon > 0.0) {
            return Err(Error::InvalidParameter(
                "fdm_epsilon must be a positive finite step".into(),
            ));
        }
        self.optimizer.validate()
    }

    /// Sweeps that fit the budget, at least one.
    pub fn outer_sweeps(&self) -> usize {
        (self.total_budget / (self.inner_f_iters + self.inner_zeta_iters)).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct LabeledTrace {
    pub label: String,
    pub trace: OptimizerTrace,
}

/// Output of any of the three schemes. The sequential and iterative
/// schemes fill `moving` (f2) and `corrected` (warp(f2, zeta)); the
/// simultaneous scheme recovers a single volume and leaves them empty.
#[derive(Debug, Clone)]
pub struct JointResult {
    pub volume: Volume,
    pub moving: Option<Volume>,
    pub corrected: Option<Volume>,
    pub transform: Transform,
    pub traces: Vec<LabeledTrace>,
    /// Joint objective after each alternation sweep (simultaneous only).
    pub objective_sweeps: Vec<f64>,
    /// Filled by the experiment layer; the solvers never see ground truth.
    pub metrics: Option<MetricsSummary>,
}

impl JointResult {
    fn check_finite(&self) -> Result<()> {
        let ok = self.volume.is_finite()
            && self.moving.as_ref().map_or(true, Volume::is_finite)
            && self.corrected.as_ref().map_or(true, Volume::is_finite)
            && self.transform.params().iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFiniteObjective(
                "solver output contains non-finite values".into(),
            ))
        }
    }

    pub fn total_evals(&self) -> usize {
        self.traces.iter().map(|t| t.trace.evals).sum()
    }

    /// sweep,objective CSV for the alternation record.
    pub fn sweeps_csv(&self) -> String {
        let mut out = String::from("sweep,objective\n");
        for (i, v) in self.objective_sweeps.iter().enumerate() {
            out.push_str(&format!("{},{:?}\n", i + 1, v));
        }
        out
    }
}

fn labeled(label: impl Into<String>, trace: OptimizerTrace) -> LabeledTrace {
    LabeledTrace {
        label: label.into(),
        trace,
    }
}

fn check_shared_geometry(p1: &ProjectionStack, p2: &ProjectionStack) -> Result<()> {
    if p1.geometry() != p2.geometry() {
        return Err(Error::ShapeMismatch(
            "projection stacks use different geometries".into(),
        ));
    }
    Ok(())
}

fn half_ssd(a: &[f64], b: &[f64]) -> f64 {
    let mut v = 0.0;
    for (x, y) in a.iter().zip(b) {
        let r = x - y;
        v += 0.5 * r * r;
    }
    v
}

/// Continue a least-squares reconstruction from `start` for the iteration
/// budget in `opts`.
fn recon_steps(
    start: &Volume,
    p: &ProjectionStack,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Volume, OptimizerTrace)> {
    let grid = *start.grid();
    let mut obj = |x: &[f64], grad: Option<&mut [f64]>| -> Result<f64> {
        let f = Volume::from_parts(grid, x.to_vec());
        match grad {
            Some(g) => {
                let (v, gv) = residual_gradient(&f, p)?;
                g.copy_from_slice(gv.data());
                Ok(v)
            }
            None => {
                let proj = forward_project(&f, p.geometry())?;
                Ok(half_ssd(proj.data(), p.data()))
            }
        }
    };
    let sol = minimize(solver, &mut obj, start.data(), opts)?;
    Ok((Volume::from_parts(grid, sol.x), sol.trace))
}

/// Least-squares reconstruction of one stack from a zero start.
pub fn reconstruct_ls(
    p: &ProjectionStack,
    grid: &GridSpec,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Volume, OptimizerTrace)> {
    grid.validate()?;
    recon_steps(&Volume::zeros(*grid), p, solver, opts)
}

fn register_steps(
    fixed: &Volume,
    moving: &Volume,
    init: &Transform,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Transform, OptimizerTrace)> {
    let mut obj = |x: &[f64], grad: Option<&mut [f64]>| -> Result<f64> {
        let t = init.with_params(x)?;
        match grad {
            Some(g) => {
                let (v, gv) = registration_value_and_gradient(fixed, moving, &t)?;
                g.copy_from_slice(&gv);
                Ok(v)
            }
            None => registration_value(fixed, moving, &t),
        }
    };
    let sol = minimize(solver, &mut obj, &init.params(), opts)?;
    Ok((init.with_params(&sol.x)?, sol.trace))
}

/// Minimize 0.5*||warp(moving, zeta) - fixed||^2 over the parameters of
/// `init`'s model, starting from `init`.
pub fn register_ssd(
    fixed: &Volume,
    moving: &Volume,
    init: &Transform,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Transform, OptimizerTrace)> {
    if !fixed.same_grid(moving) {
        return Err(Error::ShapeMismatch(
            "fixed and moving volumes must share a grid".into(),
        ));
    }
    register_steps(fixed, moving, init, solver, opts)
}

/// Reconstruct both stacks independently, then register the results.
pub fn sequential(
    p1: &ProjectionStack,
    p2: &ProjectionStack,
    grid: &GridSpec,
    opts: &SequentialOptions,
) -> Result<JointResult> {
    opts.validate()?;
    check_shared_geometry(p1, p2)?;
    let sub = |n| opts.optimizer.clone().with_max_iters(n);

    let (f1, tr1) = reconstruct_ls(p1, grid, opts.solver, &sub(opts.recon_iters))
        .map_err(|e| e.in_stage("reconstruct_fixed"))?;
    let (f2, tr2) = reconstruct_ls(p2, grid, opts.solver, &sub(opts.recon_iters))
        .map_err(|e| e.in_stage("reconstruct_moving"))?;
    let init = opts.model.initial(grid)?;
    let (zeta, tr3) = register_ssd(&f1, &f2, &init, opts.solver, &sub(opts.register_iters))
        .map_err(|e| e.in_stage("register"))?;
    let corrected = warp(&f2, &zeta).map_err(|e| e.in_stage("register"))?;

    let result = JointResult {
        volume: f1,
        moving: Some(f2),
        corrected: Some(corrected),
        transform: zeta,
        traces: vec![
            labeled("recon_fixed", tr1),
            labeled("recon_moving", tr2),
            labeled("register", tr3),
        ],
        objective_sweeps: Vec::new(),
        metrics: None,
    };
    result.check_finite()?;
    Ok(result)
}

/// Alternate short reconstruction bursts with registration, feeding the
/// warped moving volume back in as the next fixed-volume start.
pub fn iterative(
    p1: &ProjectionStack,
    p2: &ProjectionStack,
    grid: &GridSpec,
    opts: &IterativeOptions,
) -> Result<JointResult> {
    opts.validate()?;
    check_shared_geometry(p1, p2)?;
    grid.validate()?;
    let sub = |n| opts.optimizer.clone().with_max_iters(n);

    let mut f1 = Volume::zeros(*grid);
    let mut f2 = Volume::zeros(*grid);
    let mut zeta = opts.model.initial(grid)?;
    let mut f1_hat = f1.clone();
    let mut f2_hat = f2.clone();
    let mut traces = Vec::with_capacity(3 * opts.outer_sweeps);

    for sweep in 1..=opts.outer_sweeps {
        let (a, tr) = recon_steps(&f1, p1, opts.solver, &sub(opts.inner_recon_iters))
            .map_err(|e| e.in_stage("reconstruct_fixed"))?;
        f1_hat = a;
        traces.push(labeled(format!("sweep_{sweep:02}_recon_fixed"), tr));

        let (b, tr) = recon_steps(&f2, p2, opts.solver, &sub(opts.inner_recon_iters))
            .map_err(|e| e.in_stage("reconstruct_moving"))?;
        f2_hat = b;
        traces.push(labeled(format!("sweep_{sweep:02}_recon_moving"), tr));

        let (z, tr) = register_steps(
            &f1_hat,
            &f2_hat,
            &zeta,
            opts.solver,
            &sub(opts.register_iters),
        )
        .map_err(|e| e.in_stage("register"))?;
        zeta = z;
        traces.push(labeled(format!("sweep_{sweep:02}_register"), tr));

        let warped = warp(&f2_hat, &zeta).map_err(|e| e.in_stage("register"))?;
        f1 = match opts.update_rule {
            UpdateRule::ReplaceWithWarped => warped,
            UpdateRule::AverageWithWarped => {
                let data = warped
                    .data()
                    .iter()
                    .zip(f1_hat.data())
                    .map(|(w, h)| 0.5 * (w + h))
                    .collect();
                Volume::from_parts(*grid, data)
            }
        };
        f2 = f2_hat.clone();
    }

    let corrected = warp(&f2_hat, &zeta).map_err(|e| e.in_stage("register"))?;
    let result = JointResult {
        volume: f1_hat,
        moving: Some(f2_hat),
        corrected: Some(corrected),
        transform: zeta,
        traces,
        objective_sweeps: Vec::new(),
        metrics: None,
    };
    result.check_finite()?;
    Ok(result)
}

/// 0.5*(||A f - p1||^2 + ||A warp(f, zeta) - p2||^2).
pub fn simultaneous_objective(
    f: &Volume,
    zeta: &Transform,
    p1: &ProjectionStack,
    p2: &ProjectionStack,
) -> Result<f64> {
    let proj1 = forward_project(f, p1.geometry())?;
    let warped = warp(f, zeta)?;
    let proj2 = forward_project(&warped, p2.geometry())?;
    Ok(half_ssd(proj1.data(), p1.data()) + half_ssd(proj2.data(), p2.data()))
}

/// Volume gradient of the joint objective:
/// A^T(A f - p1) + W^T A^T(A warp(f, zeta) - p2)
/// with W^T the warp adjoint.
pub fn simultaneous_grad_f(
    f: &Volume,
    zeta: &Transform,
    p1: &ProjectionStack,
    p2: &ProjectionStack,
) -> Result<Volume> {
    let (_, g1) = residual_gradient(f, p1)?;
    let warped = warp(f, zeta)?;
    let (_, g2) = residual_gradient(&warped, p2)?;
    let pulled = warp_adjoint(&g2, zeta)?;
    let data = g1
        .data()
        .iter()
        .zip(pulled.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Volume::from_parts(*f.grid(), data))
}

enum ZetaRoute {
    /// Difference-quotient transform derivative with the given step.
    Fdm(f64),
    /// Exact derivative of the interpolated warp.
    Analytic,
}

/// Moving-stack misfit 0.5*||A warp(f, zeta) - p2||^2 and its transform
/// gradient. Entry i is <A D_i, r> with D_i the i-th parameter derivative
/// of the warped volume; it is evaluated as <D_i, A^T r>, which is the
/// same number because the projector pair is an exact transpose, and costs
/// one back-projection in place of a forward projection per parameter.
fn zeta_value_and_grad(
    f: &Volume,
    zeta: &Transform,
    p2: &ProjectionStack,
    route: &ZetaRoute,
) -> Result<(f64, Vec<f64>)> {
    let warped = warp(f, zeta)?;
    let mut resid = forward_project(&warped, p2.geometry())?;
    for (a, b) in resid.data_mut().iter_mut().zip(p2.data()) {
        *a -= b;
    }
    let value = 0.5 * resid.norm_sq();
    let back = back_project(&resid, f.grid())?;
    let grad = match route {
        ZetaRoute::Fdm(eps) => {
            let mut g = vec![0.0f64; zeta.num_params()];
            for (i, gi) in g.iter_mut().enumerate() {
                let col = fdm_transform_derivative(f, zeta, i, *eps)?;
                *gi = dot(col.data(), back.data());
            }
            g
        }
        ZetaRoute::Analytic => weighted_param_gradient(f, zeta, back.data())?,
    };
    Ok((value, grad))
}

/// Transform gradient of the joint objective via the difference-quotient
/// derivative of the warp, step `epsilon`.
pub fn simultaneous_grad_zeta(
    f: &Volume,
    zeta: &Transform,
    p2: &ProjectionStack,
    epsilon: f64,
) -> Result<Vec<f64>> {
    zeta_value_and_grad(f, zeta, p2, &ZetaRoute::Fdm(epsilon)).map(|(_, g)| g)
}

fn solve_f(
    start: &Volume,
    zeta: &Transform,
    p1: &ProjectionStack,
    p2: &ProjectionStack,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Volume, OptimizerTrace)> {
    let grid = *start.grid();
    let mut obj = |x: &[f64], grad: Option<&mut [f64]>| -> Result<f64> {
        let f = Volume::from_parts(grid, x.to_vec());
        match grad {
            Some(g) => {
                let (v1, g1) = residual_gradient(&f, p1)?;
                let warped = warp(&f, zeta)?;
                let (v2, g2) = residual_gradient(&warped, p2)?;
                let pulled = warp_adjoint(&g2, zeta)?;
                for ((o, a), b) in g.iter_mut().zip(g1.data()).zip(pulled.data()) {
                    *o = a + b;
                }
                Ok(v1 + v2)
            }
            None => simultaneous_objective(&f, zeta, p1, p2),
        }
    };
    let sol = minimize(solver, &mut obj, start.data(), opts)?;
    Ok((Volume::from_parts(grid, sol.x), sol.trace))
}

fn solve_zeta(
    f: &Volume,
    init: &Transform,
    p2: &ProjectionStack,
    route: &ZetaRoute,
    solver: Solver,
    opts: &OptimizerOptions,
) -> Result<(Transform, OptimizerTrace)> {
    let mut obj = |x: &[f64], grad: Option<&mut [f64]>| -> Result<f64> {
        let t = init.with_params(x)?;
        match grad {
            Some(g) => {
                let (v, gz) = zeta_value_and_grad(f, &t, p2, route)?;
                g.copy_from_slice(&gz);
                Ok(v)
            }
            None => {
                let warped = warp(f, &t)?;
                let proj = forward_project(&warped, p2.geometry())?;
                Ok(half_ssd(proj.data(), p2.data()))
            }
        }
    };
    let sol = minimize(solver, &mut obj, &init.params(), opts)?;
    Ok((init.with_params(&sol.x)?, sol.trace))
}

/// Decoupled alternating minimization of the joint objective: inner bursts
/// over the volume with the transform held fixed, then over the transform
/// with the volume held fixed, repeated until the budget is spent.
///
/// The affine path follows the difference-quotient transform derivative;
/// the spline path uses the analytic derivative, its exact zero-step limit,
/// because probing thousands of coefficients one warp at a time is not
/// affordable. The two routes are pinned against each other in the tests.
pub fn simultaneous(
    p1: &ProjectionStack,
    p2: &ProjectionStack,
    grid: &GridSpec,
    opts: &SimultaneousOptions,
) -> Result<JointResult> {
    opts.validate()?;
    check_shared_geometry(p1, p2)?;
    grid.validate()?;
    let sub = |n| opts.optimizer.clone().with_max_iters(n);

    let mut f = Volume::zeros(*grid);
    let mut zeta = opts.model.initial(grid)?;
    let route = match zeta {
        Transform::Affine(_) => ZetaRoute::Fdm(opts.fdm_epsilon),
        Transform::BSpline(_) => ZetaRoute::Analytic,
    };
    let sweeps = opts.outer_sweeps();
    let mut traces = Vec::with_capacity(2 * sweeps);
    let mut objective_sweeps = Vec::with_capacity(sweeps);
    let mut prev = f64::INFINITY;

    for sweep in 1..=sweeps {
        let (nf, tr) = solve_f(&f, &zeta, p1, p2, opts.solver, &sub(opts.inner_f_iters))
            .map_err(|e| e.in_stage("volume_update"))?;
        f = nf;
        traces.push(labeled(format!("sweep_{sweep:02}_volume"), tr));
        if opts.clamp_nonnegative {
            for v in f.data_mut().iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }

        if !opts.freeze_transform {
            let (nz, tr) = solve_zeta(
                &f,
                &zeta,
                p2,
                &route,
                opts.solver,
                &sub(opts.inner_zeta_iters),
            )
            .map_err(|e| e.in_stage("transform_update"))?;
            zeta = nz;
            traces.push(labeled(format!("sweep_{sweep:02}_transform"), tr));
        }

        let joint = simultaneous_objective(&f, &zeta, p1, p2)
            .map_err(|e| e.in_stage("sweep_objective"))?;
        if !joint.is_finite() {
            return Err(Error::NonFiniteObjective(format!(
                "joint objective diverged at sweep {sweep}; last finite value {prev:?}"
            )));
        }
        // Both sub-solves are monotone in the joint objective, so a rise
        // can only come from the clamp projection.
        if !opts.clamp_nonnegative {
            debug_assert!(
                joint <= prev + 1e-9 * (1.0 + prev.abs()),
                "joint objective rose across sweep {sweep}: {prev:?} -> {joint:?}"
            );
        }
        objective_sweeps.push(joint);
        prev = joint;
    }

    let result = JointResult {
        volume: f,
        moving: None,
        corrected: None,
        transform: zeta,
        traces,
        objective_sweeps,
        metrics: None,
    };
    result.check_finite()?;
    Ok(result)
}
