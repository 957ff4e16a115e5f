//! Nonlinear conjugate gradient, Polak-Ribiere+ flavor.

use crate::error::{Error, Result};

use super::{
    dot, grad_converged, inf_norm, search_along, value_converged, IterationRecord, Objective,
    OptimizerOptions, OptimizerTrace, Solution, TerminationReason,
};

pub fn nonlinear_cg(
    obj: &mut dyn Objective,
    x0: &[f64],
    opts: &OptimizerOptions,
) -> Result<Solution> {
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
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut g_prev = vec![0.0f64; n];
    let mut xt = vec![0.0f64; n];
    let mut gt = vec![0.0f64; n];
    let mut termination = TerminationReason::MaxIters;

    if grad_converged(records[0].grad_norm, f, opts.grad_tol) {
        termination = TerminationReason::GradTol;
    } else {
        for iter in 1..=opts.max_iters {
            if iter > 1 {
                // beta = max(0, g.(g - g_prev) / g_prev.g_prev); the max
                // restarts automatically when conjugacy has decayed.
                let denom = dot(&g_prev, &g_prev);
                let beta = (dot(&g, &g) - dot(&g, &g_prev)) / denom;
                let beta = beta.max(0.0);
                for (dv, gv) in d.iter_mut().zip(&g) {
                    *dv = -gv + beta * *dv;
                }
            }
            let mut slope = dot(&d, &g);
            if slope >= 0.0 {
                // Restart on a non-descent direction.
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
            let f_prev = f;
            f = outcome.value;
            x.copy_from_slice(&xt);
            g_prev.copy_from_slice(&g);
            g.copy_from_slice(&gt);
            let g_inf = inf_norm(&g);
            records.push(IterationRecord {
                iteration: iter,
                value: f,
                grad_norm: g_inf,
                step: outcome.tau,
            });

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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_start_stops_at_iteration_zero() {
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi = *xi;
                }
            }
            Ok(0.5 * dot(x, x))
        };
        let sol = nonlinear_cg(&mut obj, &[0.0; 4], &OptimizerOptions::default()).unwrap();
        assert_eq!(sol.trace.termination, TerminationReason::GradTol);
        assert_eq!(sol.trace.iterations(), 0);
    }

    #[test]
    fn rosenbrock_converges() {
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            let (a, b) = (x[0], x[1]);
            if let Some(g) = grad {
                g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
                g[1] = 200.0 * (b - a * a);
            }
            Ok(100.0 * (b - a * a) * (b - a * a) + (1.0 - a) * (1.0 - a))
        };
        let opts = OptimizerOptions {
            max_iters: 2000,
            grad_tol: 1e-10,
            f_tol: 0.0,
            ..OptimizerOptions::default()
        };
        let sol = nonlinear_cg(&mut obj, &[-1.2, 1.0], &opts).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-5 && (sol.x[1] - 1.0).abs() < 1e-5,
            "x = {:?}", sol.x);
    }
}
