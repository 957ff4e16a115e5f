//! Solver cross-checks against dense linear algebra: an explicit BFGS
//! inverse Hessian rebuilt from the accepted curvature pairs, direct
//! normal-equation solves, and Wolfe-condition replay of every accepted
//! step recovered from an evaluation log.

mod common;

use std::cell::RefCell;
use std::collections::VecDeque;

use rand::Rng;
use tomojoint::optimize::{
    lbfgs, nonlinear_cg, IterationRecord, OptimizerOptions, Solution,
};
use tomojoint::Result;

use common::{dense_solve, dot, norm, rng};

struct LoggedEval {
    value: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Wrap an objective so every gradient evaluation is recorded. The strong
/// Wolfe search requests a gradient at each trial, so the log covers every
/// point the solver touched.
fn logging<F>(mut f: F, log: &RefCell<Vec<LoggedEval>>) -> impl FnMut(&[f64], Option<&mut [f64]>) -> Result<f64> + '_
where
    F: FnMut(&[f64], &mut [f64]) -> f64 + 'static,
{
    move |x: &[f64], grad: Option<&mut [f64]>| {
        let mut g = vec![0.0; x.len()];
        let v = f(x, &mut g);
        log.borrow_mut().push(LoggedEval {
            value: v,
            x: x.to_vec(),
            grad: g.clone(),
        });
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        Ok(v)
    }
}

/// Match each trace record to its evaluation by bit-equal objective value.
/// Duplicate matches are tolerated only when they are the same point bit for
/// bit (a stalled search re-evaluating x + tau d == x). Returns the accepted
/// iterates and their gradients in iteration order.
fn accepted_points(log: &[LoggedEval], records: &[IterationRecord]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let same_bits = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let mut xs = Vec::with_capacity(records.len());
    let mut gs = Vec::with_capacity(records.len());
    for rec in records {
        let hits: Vec<&LoggedEval> = log
            .iter()
            .filter(|e| e.value.to_bits() == rec.value.to_bits())
            .collect();
        assert!(
            !hits.is_empty(),
            "iteration {}: no log entry for value {:?}",
            rec.iteration,
            rec.value
        );
        assert!(
            hits.iter().all(|e| same_bits(&e.x, &hits[0].x)),
            "iteration {}: value matched {} distinct points",
            rec.iteration,
            hits.len()
        );
        xs.push(hits[0].x.clone());
        gs.push(hits[0].grad.clone());
    }
    (xs, gs)
}

fn quadratic_data(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let m: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut v = 0.0;
            for k in 0..n {
                v += m[k * n + i] * m[k * n + j];
            }
            q[i * n + j] = v;
        }
        q[i * n + i] += 1.0;
    }
    let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    (q, b)
}

fn quadratic_eval(q: &[f64], b: &[f64], x: &[f64], g: &mut [f64]) -> f64 {
    let n = x.len();
    let mut qx = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            qx[i] += q[i * n + j] * x[j];
        }
    }
    for i in 0..n {
        g[i] = qx[i] - b[i];
    }
    0.5 * dot(x, &qx) - dot(b, x)
}

/// Textbook dense BFGS: H0 = gamma I from the newest pair, then
/// H <- (I - rho s z^T) H (I - rho z s^T) + rho s s^T per stored pair in
/// chronological order. Returns -H g.
fn dense_bfgs_direction(pairs: &[(Vec<f64>, Vec<f64>)], g: &[f64]) -> Vec<f64> {
    let n = g.len();
    if pairs.is_empty() {
        return g.iter().map(|v| -v).collect();
    }
    let (s_new, z_new) = pairs.last().unwrap();
    let gamma = dot(s_new, z_new) / dot(z_new, z_new);
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = gamma;
    }
    for (s, z) in pairs {
        let rho = 1.0 / dot(s, z);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = f64::from(i == j) - rho * s[i] * z[j];
            }
        }
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                for j in 0..n {
                    t[i * n + j] += aik * h[k * n + j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let mut v = rho * s[i] * s[j];
                for k in 0..n {
                    v += t[i * n + k] * a[j * n + k];
                }
                h[i * n + j] = v;
            }
        }
    }
    let mut d = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            d[i] -= h[i * n + j] * g[j];
        }
    }
    d
}

#[test]
fn lbfgs_directions_match_dense_bfgs_rebuild() {
    let n = 12;
    let history = 3;
    let (q, b) = quadratic_data(41, n);
    let log = RefCell::new(Vec::new());
    // grad_tol stops short of the floating-point plateau where trial values
    // collide and the log match would turn ambiguous.
    let opts = OptimizerOptions {
        max_iters: 60,
        grad_tol: 1e-6,
        f_tol: 0.0,
        history,
        ..OptimizerOptions::default()
    };
    let sol = {
        let mut obj = logging(move |x, g| quadratic_eval(&q, &b, x, g), &log);
        lbfgs(&mut obj, &vec![0.0; n], &opts).unwrap()
    };
    let records = &sol.trace.records;
    assert!(
        records.len() > history + 3,
        "too few iterations ({}) to exercise pair eviction",
        records.len() - 1
    );
    let (xs, gs) = accepted_points(&log.borrow(), records);

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    for k in 1..xs.len() {
        let tau = records[k].step;
        assert!(tau > 0.0);
        let s: Vec<f64> = xs[k].iter().zip(&xs[k - 1]).map(|(a, b)| a - b).collect();
        let d_used: Vec<f64> = s.iter().map(|v| v / tau).collect();
        let snapshot: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().cloned().collect();
        let d_pred = dense_bfgs_direction(&snapshot, &gs[k - 1]);
        let err = common::rel_vec_err(&d_used, &d_pred);
        assert!(err <= 1e-10, "iteration {k}: direction mismatch {err:.3e}");

        let z: Vec<f64> = gs[k].iter().zip(&gs[k - 1]).map(|(a, b)| a - b).collect();
        // Same curvature filter as the solver.
        if dot(&s, &z) > 1e-10 * norm(&s) * norm(&z) {
            pairs.push_back((s, z));
            while pairs.len() > history {
                pairs.pop_front();
            }
        }
    }
}

#[test]
fn both_solvers_reach_dense_normal_solution() {
    let n = 10;
    let (q, b) = quadratic_data(42, n);
    let x_star = dense_solve(&q, &b);
    let opts = OptimizerOptions {
        max_iters: 300,
        grad_tol: 1e-13,
        f_tol: 0.0,
        wolfe_c2: 0.1,
        ..OptimizerOptions::default()
    };
    let run = |use_cg: bool| -> Solution {
        let (qc, bc) = (q.clone(), b.clone());
        let mut obj = move |x: &[f64], grad: Option<&mut [f64]>| {
            let mut g = vec![0.0; x.len()];
            let v = quadratic_eval(&qc, &bc, x, &mut g);
            if let Some(out) = grad {
                out.copy_from_slice(&g);
            }
            Ok(v)
        };
        if use_cg {
            nonlinear_cg(&mut obj, &vec![0.0; n], &opts).unwrap()
        } else {
            lbfgs(&mut obj, &vec![0.0; n], &opts).unwrap()
        }
    };
    for (name, sol, tol) in [
        ("lbfgs", run(false), 1e-8),
        ("cg", run(true), 1e-6),
    ] {
        let err = sol
            .x
            .iter()
            .zip(&x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= tol, "{name}: |x - x*| = {err:.3e}");
    }
}

#[test]
fn wolfe_conditions_hold_on_every_accepted_step() {
    let rosenbrock = |x: &[f64], g: &mut [f64]| {
        let (a, b) = (x[0], x[1]);
        g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
        g[1] = 200.0 * (b - a * a);
        100.0 * (b - a * a) * (b - a * a) + (1.0 - a) * (1.0 - a)
    };
    let (q, b) = quadratic_data(43, 8);

    let opts = OptimizerOptions {
        max_iters: 200,
        grad_tol: 1e-6,
        f_tol: 0.0,
        ..OptimizerOptions::default()
    };
    let cases: [(&str, Box<dyn Fn(&RefCell<Vec<LoggedEval>>) -> Solution>); 4] = [
        (
            "lbfgs/rosenbrock",
            Box::new(|log| {
                let mut obj = logging(rosenbrock, log);
                lbfgs(&mut obj, &[-1.2, 1.0], &opts).unwrap()
            }),
        ),
        (
            "cg/rosenbrock",
            Box::new(|log| {
                let mut obj = logging(rosenbrock, log);
                nonlinear_cg(&mut obj, &[-1.2, 1.0], &opts).unwrap()
            }),
        ),
        (
            "lbfgs/quadratic",
            Box::new(|log| {
                let (qc, bc) = (q.clone(), b.clone());
                let mut obj = logging(move |x, g| quadratic_eval(&qc, &bc, x, g), log);
                lbfgs(&mut obj, &vec![1.0; 8], &opts).unwrap()
            }),
        ),
        (
            "cg/quadratic",
            Box::new(|log| {
                let (qc, bc) = (q.clone(), b.clone());
                let mut obj = logging(move |x, g| quadratic_eval(&qc, &bc, x, g), log);
                nonlinear_cg(&mut obj, &vec![1.0; 8], &opts).unwrap()
            }),
        ),
    ];

    for (name, run) in &cases {
        let log = RefCell::new(Vec::new());
        let sol = run(&log);
        let records = &sol.trace.records;
        assert!(records.len() >= 2, "{name}: no accepted steps");
        let (xs, gs) = accepted_points(&log.borrow(), records);
        for k in 1..xs.len() {
            let tau = records[k].step;
            let d: Vec<f64> = xs[k]
                .iter()
                .zip(&xs[k - 1])
                .map(|(a, b)| (a - b) / tau)
                .collect();
            let slope0 = dot(&gs[k - 1], &d);
            assert!(slope0 < 0.0, "{name} iteration {k}: non-descent direction");
            let armijo = records[k - 1].value + opts.wolfe_c1 * tau * slope0;
            assert!(
                records[k].value <= armijo + 1e-12 * armijo.abs().max(1.0),
                "{name} iteration {k}: sufficient decrease violated"
            );
            let slope1 = dot(&gs[k], &d);
            assert!(
                slope1.abs() <= opts.wolfe_c2 * slope0.abs() * (1.0 + 1e-12),
                "{name} iteration {k}: curvature condition violated ({} vs {})",
                slope1.abs(),
                opts.wolfe_c2 * slope0.abs()
            );
        }
        // Strong Wolfe steps can only go downhill.
        for w in records.windows(2) {
            assert!(w[1].value <= w[0].value);
        }
    }
}
