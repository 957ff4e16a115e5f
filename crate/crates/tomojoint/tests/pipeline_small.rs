//! End-to-end pipeline checks at desk scale: the least-squares
//! reconstruction against a dense normal-equation solve, and the three
//! joint strategies on small synthetic pairs where ground truth is known.

mod common;

use tomojoint::geometry::{Axis, Beam, Geometry};
use tomojoint::metrics::mse;
use tomojoint::optimize::{OptimizerOptions, Solver};
use tomojoint::phantom::{make_toroid, simulate_pair, ToroidSpec};
use tomojoint::pipeline::{
    iterative, reconstruct_ls, sequential, simultaneous, IterativeOptions, SequentialOptions,
    SimultaneousOptions,
};
use tomojoint::transform::{affine_build, warp, Transform};
use tomojoint::volume::GridSpec;

use common::{dense_solve, rel_vec_err, DenseOperator};

fn small_toroid(n: usize) -> (tomojoint::Volume, GridSpec) {
    let spec = ToroidSpec {
        volume_dims: [n, n, n],
        major_radius_mm: n as f64 * 0.28,
        minor_radius_mm: n as f64 * 0.11,
        ..ToroidSpec::default()
    };
    let v = make_toroid(&spec).unwrap();
    let grid = *v.grid();
    (v, grid)
}

/// Wide-arc parallel geometry so the normal matrix is invertible; the
/// clinical limited arc leaves a null space that would make the comparison
/// against a direct solve ill-posed.
#[test]
fn reconstruction_matches_dense_normal_equations() {
    let grid = GridSpec::centered([8, 8, 8], [1.0, 1.0, 1.0]);
    let g = Geometry::default_for_grid(&grid, 13, (-85.0, 85.0), Beam::Parallel, Axis::X).unwrap();
    let (f_true, _) = small_toroid(8);
    let p = tomojoint::projector::forward_project(&f_true, &g).unwrap();

    let op = DenseOperator::assemble(&grid, &g);
    let ata = op.normal_matrix();
    let atp = op.apply_transpose(p.data());
    let x_star = dense_solve(&ata, &atp);
    // Guard against a silently singular system.
    let n = atp.len();
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut v = -atp[i];
        for j in 0..n {
            v += ata[i * n + j] * x_star[j];
        }
        resid[i] = v;
    }
    let resid_rel = common::norm(&resid) / common::norm(&atp);
    assert!(resid_rel <= 1e-8, "normal solve residual {resid_rel:.3e}");

    let opts = OptimizerOptions {
        max_iters: 2000,
        grad_tol: 1e-12,
        f_tol: 0.0,
        wolfe_c2: 0.1,
        ..OptimizerOptions::default()
    };
    let (recon, trace) = reconstruct_ls(&p, &grid, Solver::Lbfgs, &opts).unwrap();
    let err = rel_vec_err(recon.data(), &x_star);
    assert!(
        err <= 1e-6,
        "reconstruction vs dense solve: {err:.3e} after {} iterations",
        trace.iterations()
    );
}

fn toroid_pair(
    n: usize,
    truth: &Transform,
) -> (tomojoint::Volume, Geometry, tomojoint::projector::ProjectionStack, tomojoint::projector::ProjectionStack) {
    let (f, grid) = small_toroid(n);
    let g = Geometry::default_for_grid(&grid, 9, (-25.0, 25.0), Beam::Cone, Axis::X).unwrap();
    let (p1, p2) = simulate_pair(&f, truth, &g, None).unwrap();
    (f, g, p1, p2)
}

#[test]
fn sequential_recovers_inverse_translation() {
    let truth = Transform::Affine(
        affine_build([1.5, 0.0, -2.0], [0.0; 3], [1.0; 3], [0.0; 3]).unwrap(),
    );
    let (f, _g, p1, p2) = toroid_pair(24, &truth);
    let grid = *f.grid();

    let opts = SequentialOptions {
        recon_iters: 150,
        register_iters: 80,
        ..SequentialOptions::default()
    };
    let result = sequential(&p1, &p2, &grid, &opts).unwrap();
    let params = result.transform.params();
    // Registration maps the moving reconstruction back onto the fixed one,
    // so it finds the inverse of the simulated motion.
    let want = [-1.5, 0.0, 2.0];
    for (i, &pi) in [3usize, 7, 11].iter().enumerate() {
        assert!(
            (params[pi] - want[i]).abs() <= 0.5,
            "translation[{i}] = {} want {}",
            params[pi],
            want[i]
        );
    }
    let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for (k, &mi) in [0usize, 1, 2, 4, 5, 6, 8, 9, 10].iter().enumerate() {
        assert!(
            (params[mi] - identity[k]).abs() <= 0.05,
            "matrix entry {mi} drifted to {}",
            params[mi]
        );
    }
}

#[test]
fn iterative_tracks_sequential_on_equal_budget() {
    let truth = Transform::Affine(
        affine_build([2.0, 0.0, -2.5], [0.0, -20.0, 0.0], [1.0; 3], [0.0; 3]).unwrap(),
    );
    let (f, _g, p1, p2) = toroid_pair(24, &truth);
    let grid = *f.grid();
    let initial = mse(&warp(&f, &truth).unwrap(), &f).unwrap();

    let seq_opts = SequentialOptions {
        recon_iters: 100,
        register_iters: 60,
        ..SequentialOptions::default()
    };
    let it_opts = IterativeOptions {
        outer_sweeps: 5,
        inner_recon_iters: 20,
        register_iters: 12,
        ..IterativeOptions::default()
    };
    assert_eq!(seq_opts.total_budget(), it_opts.total_budget());

    let seq = sequential(&p1, &p2, &grid, &seq_opts).unwrap();
    let it = iterative(&p1, &p2, &grid, &it_opts).unwrap();
    let mse_seq = mse(seq.corrected.as_ref().unwrap(), &f).unwrap();
    let mse_it = mse(it.corrected.as_ref().unwrap(), &f).unwrap();

    assert!(
        mse_seq < 0.5 * initial && mse_it < 0.5 * initial,
        "little progress: initial {initial:.3e}, seq {mse_seq:.3e}, iter {mse_it:.3e}"
    );
    // Interleaving must not lose to the same budget spent in one pass;
    // small slack absorbs discretization luck.
    assert!(
        mse_it <= 1.10 * mse_seq,
        "iterative {mse_it:.3e} vs sequential {mse_seq:.3e}"
    );
}

#[test]
fn simultaneous_beats_frozen_transform_ablation() {
    let truth = Transform::Affine(
        affine_build([2.0, 1.0, -1.5], [0.0; 3], [1.0; 3], [0.0; 3]).unwrap(),
    );
    let (f, _g, p1, p2) = toroid_pair(20, &truth);
    let grid = *f.grid();

    // Short volume passes between transform updates: over-solving f
    // against a stale transform entrenches limited-angle artifacts that
    // later sweeps remove only at the rate of the smallest singular
    // values, so many cheap alternations beat few thorough ones.
    let free = SimultaneousOptions {
        total_budget: 1200,
        inner_f_iters: 5,
        inner_zeta_iters: 10,
        ..SimultaneousOptions::default()
    };
    let frozen = SimultaneousOptions {
        freeze_transform: true,
        ..free.clone()
    };
    let free_res = simultaneous(&p1, &p2, &grid, &free).unwrap();
    let frozen_res = simultaneous(&p1, &p2, &grid, &frozen).unwrap();

    let mse_free = mse(&free_res.volume, &f).unwrap();
    let mse_frozen = mse(&frozen_res.volume, &f).unwrap();
    assert!(
        mse_free < 0.5 * mse_frozen,
        "free {mse_free:.3e} vs frozen {mse_frozen:.3e}"
    );

    // The coupled model sees the simulated motion directly.
    let params = free_res.transform.params();
    let want = [2.0, 1.0, -1.5];
    for (i, &pi) in [3usize, 7, 11].iter().enumerate() {
        assert!(
            (params[pi] - want[i]).abs() <= 0.5,
            "translation[{i}] = {} want {}",
            params[pi],
            want[i]
        );
    }

    // Joint objective never rises across sweeps without the clamp.
    for w in free_res.objective_sweeps.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
}

#[test]
fn run_loaded_is_deterministic_and_writes_artifacts() {
    use tomojoint::config::ExperimentConfig;
    use tomojoint::experiment::run_loaded;

    tomojoint::par::set_threads(1);
    let base = tempfile::tempdir().unwrap();
    let text = |out: &str| {
        format!(
            r#"
output_dir = "{out}"

[geometry]
num_views = 7

[phantom.toroid]
volume_dims = [16, 16, 16]
major_radius_mm = 4.5
minor_radius_mm = 1.8

[truth.affine]
translation_mm = [1.0, 0.0, -1.0]

[method.sequential]
recon_iters = 30
register_iters = 20
"#
        )
    };
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = base.path().join(format!("run{run}"));
        let t = text(out.to_str().unwrap());
        let cfg = ExperimentConfig::from_toml_str(&t).unwrap();
        let summary = run_loaded(&cfg, &t, base.path()).unwrap();
        assert_eq!(summary.output_dir, out);
        outputs.push(out);
    }
    for name in [
        "config.toml",
        "manifest.txt",
        "metrics.csv",
        "traces.csv",
        "phantom.txt",
        "phantom.raw",
        "projections_fixed.txt",
        "projections_moving.txt",
        "truth_transform.txt",
        "transform.txt",
        "volume.txt",
        "volume.raw",
    ] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        assert!(!a.is_empty(), "{name} empty");
    }
    for name in ["metrics.csv", "volume.raw", "transform.txt", "traces.csv"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
