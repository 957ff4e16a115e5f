//! Two-loop-recursion L-BFGS.

use std::collections::VecDeque;

use crate::error::{Error, Result};

use super::{
    dot, grad_converged, inf_norm, search_along, value_converged, IterationRecord, Objective,
    OptimizerOptions, OptimizerTrace, Solution, TerminationReason,
};

struct Pair {
    s: Vec<f64>,
    z: Vec<f64>,
    rho: f64,
}

/// d = -H g with H built implicitly from the stored curvature pairs,
/// seeded with gamma * I from the newest pair.
fn two_loop(pairs: &VecDeque<Pair>, g: &[f64], d: &mut [f64]) {
    d.copy_from_slice(g);
    if pairs.is_empty() {
        for v in d.iter_mut() {
            *v = -*v;
        }
        return;
    }
    let mut alpha = vec![0.0f64; pairs.len()];
    for (i, p) in pairs.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, d);
        alpha[i] = a;
        for (dv, zv) in d.iter_mut().zip(&p.z) {
            *dv -= a * zv;
        }
    }
    let newest = pairs.back().unwrap();
    let gamma = dot(&newest.s, &newest.z) / dot(&newest.z, &newest.z);
    for v in d.iter_mut() {
        *v *= gamma;
    }
    for (i, p) in pairs.iter().enumerate() {
        let b = p.rho * dot(&p.z, d);
        for (dv, sv) in d.iter_mut().zip(&p.s) {
            *dv += (alpha[i] - b) * sv;
        }
    }
    for v in d.iter_mut() {
        *v = -*v;
    }
}

pub fn lbfgs(obj: &mut dyn Objective, x0: &[f64], opts: &OptimizerOptions) -> Result<Solution> {
    opts.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0f64; n];
    let mut evals = 1usize;
    let mut f = obj.eval(&x, Some(&mut g))?;
    if !f.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteObjective(
            "objective or gradient non-finite at the start point".into(),
        ));
    }

    let mut records = vec![IterationRecord {
        iteration: 0,
        value: f,
        grad_norm: inf_norm(&g),
        step: 0.0,
    }];
    let mut pairs: VecDeque<Pair> = VecDeque::new();
    let mut d = vec![0.0f64; n];
    let mut xt = vec![0.0f64; n];
    let mut gt = vec![0.0f64; n];
    let mut termination = TerminationReason::MaxIters;

    if grad_converged(records[0].grad_norm, f, opts.grad_tol) {
        termination = TerminationReason::GradTol;
    } else {
        for iter in 1..=opts.max_iters {
            two_loop(&pairs, &g, &mut d);
            let mut slope = dot(&d, &g);
            if slope >= 0.0 {
                // Numerically degenerate memory; fall back to steepest
                // descent and drop the history.
                pairs.clear();
                d.iter_mut().zip(&g).for_each(|(dv, gv)| *dv = -gv);
                slope = -dot(&g, &g);
            }
            let tau0 = if iter == 1 {
                1.0 / (1.0 + inf_norm(&g))
            } else {
                1.0
            };
            let outcome = match search_along(
                obj, opts, &x, &d, f, slope, tau0, &mut xt, &mut gt, &mut evals,
            ) {
                Ok(o) => o,
                Err(Error::LineSearchFailure { .. }) => {
                    termination = TerminationReason::LineSearchFailure;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !outcome.have_grad {
                evals += 1;
                obj.eval(&xt, Some(&mut gt))?;
            }
            let mut s = vec![0.0f64; n];
            let mut z = vec![0.0f64; n];
            for i in 0..n {
                s[i] = xt[i] - x[i];
                z[i] = gt[i] - g[i];
            }
            let f_prev = f;
            f = outcome.value;
            x.copy_from_slice(&xt);
            g.copy_from_slice(&gt);
            let g_inf = inf_norm(&g);
            records.push(IterationRecord {
                iteration: iter,
                value: f,
                grad_norm: g_inf,
                step: outcome.tau,
            });

            let sz = dot(&s, &z);
            let s_norm = dot(&s, &s).sqrt();
            let z_norm = dot(&z, &z).sqrt();
            if sz > 1e-10 * s_norm * z_norm {
                pairs.push_back(Pair { s, z, rho: 1.0 / sz });
                while pairs.len() > opts.history {
                    pairs.pop_front();
                }
            }

            if grad_converged(g_inf, f, opts.grad_tol) {
                termination = TerminationReason::GradTol;
                break;
            }
            if value_converged(f_prev, f, opts.f_tol) {
                termination = TerminationReason::FTol;
                break;
            }
        }
    }

    Ok(Solution {
        x,
        value: f,
        trace: OptimizerTrace {
            records,
            termination,
            evals,
        },
    })
}
