//! One full run from a config file: build the object, simulate the two
//! acquisitions, solve, score against the ground truth the solvers never
//! saw, and leave a self-describing directory of artifacts behind.
//!
//! Input paths in the config resolve relative to the config file;
//! `output_dir` resolves relative to the working directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{config_hash, ExperimentConfig, MethodConfig};
use crate::error::{Error, Result};
use crate::io::{save_stack, save_transform, save_volume, write_text, Scalar};
use crate::metrics::{mse, param_abs_error, relative_error, MetricsSummary};
use crate::phantom::simulate_pair;
use crate::pipeline::{self, JointResult};
use crate::transform::{warp, Transform};
use crate::volume::Volume;

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub result: JointResult,
    /// (stage name, wall-clock seconds) in execution order.
    pub timings: Vec<(&'static str, f64)>,
}

/// Ground truth the recovered transform should match. The sequential and
/// iterative schemes register the moving reconstruction onto the fixed one,
/// so they recover the inverse motion; the simultaneous scheme warps its
/// single volume forward and recovers the motion itself.
fn expected_transform(truth: &Transform, method: &MethodConfig) -> Option<Transform> {
    match method {
        MethodConfig::Simultaneous(_) => Some(truth.clone()),
        MethodConfig::Sequential(_) | MethodConfig::Iterative(_) => match truth {
            Transform::Affine(a) => a.inverse().ok().map(Transform::Affine),
            // No closed-form inverse for a lattice deformation.
            Transform::BSpline(_) => None,
        },
    }
}

fn attach_metrics(
    result: &mut JointResult,
    fixed_truth: &Volume,
    truth: &Transform,
    method: &MethodConfig,
) -> Result<()> {
    let compared = result.corrected.as_ref().unwrap_or(&result.volume);
    let moved_truth = warp(fixed_truth, truth)?;
    let param_errors = expected_transform(truth, method)
        .and_then(|expect| param_abs_error(&result.transform, &expect).ok())
        .unwrap_or_default();
    result.metrics = Some(MetricsSummary {
        mse: mse(compared, fixed_truth)?,
        relative_error: relative_error(compared, fixed_truth)?,
        param_abs_error: param_errors,
        initial_mse: mse(&moved_truth, fixed_truth)?,
    });
    Ok(())
}

fn traces_csv(result: &JointResult) -> String {
    let mut out = String::from("label,iteration,value,grad_norm,step\n");
    for lt in &result.traces {
        for r in &lt.trace.records {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?}\n",
                lt.label, r.iteration, r.value, r.grad_norm, r.step
            ));
        }
    }
    out
}

fn manifest(
    config_text: &str,
    cfg: &ExperimentConfig,
    result: &JointResult,
    timings: &[(&'static str, f64)],
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "tool = {} {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    ));
    out.push_str(&format!("config_hash = {}\n", config_hash(config_text)));
    out.push_str(&format!("method = {}\n", cfg.method.name()));
    if let Some(seed) = cfg.truth.seed() {
        out.push_str(&format!("truth_seed = {seed}\n"));
    }
    if let Some(noise) = &cfg.noise {
        out.push_str(&format!("noise_seed = {}\n", noise.seed));
    }
    out.push_str(&format!(
        "kernels = {}\n",
        if crate::par::sequential_forced() {
            "sequential"
        } else {
            "parallel"
        }
    ));
    out.push_str(&format!("objective_evals = {}\n", result.total_evals()));
    for (stage, secs) in timings {
        out.push_str(&format!("stage_{stage}_s = {secs:.3}\n"));
    }
    out
}

fn create_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

/// Write the solver-side artifacts (volumes, transform, traces, metrics)
/// into `dir`, creating it if needed. The simulation-side artifacts are the
/// caller's business.
pub fn write_result_artifacts(dir: &Path, result: &JointResult) -> Result<()> {
    create_output_dir(dir)?;
    save_volume(dir.join("volume.txt"), &result.volume, Scalar::F64)?;
    if let Some(m) = &result.moving {
        save_volume(dir.join("moving.txt"), m, Scalar::F64)?;
    }
    if let Some(c) = &result.corrected {
        save_volume(dir.join("corrected.txt"), c, Scalar::F64)?;
    }
    save_transform(dir.join("transform.txt"), &result.transform)?;
    write_text(dir.join("traces.csv"), &traces_csv(result))?;
    if !result.objective_sweeps.is_empty() {
        write_text(dir.join("sweeps.csv"), &result.sweeps_csv())?;
    }
    if let Some(m) = &result.metrics {
        write_text(dir.join("metrics.csv"), &m.csv())?;
    }
    Ok(())
}

/// Execute a config loaded from `path` and write every artifact under its
/// `output_dir`. Returns the in-memory results for callers that want them.
pub fn run_experiment(path: impl AsRef<Path>) -> Result<RunSummary> {
    let path = path.as_ref();
    let config_text = crate::io::read_text(path)?;
    let cfg = ExperimentConfig::from_toml_str(&config_text)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    run_loaded(&cfg, &config_text, &base)
}

/// Same as `run_experiment` for an already parsed config; `base` anchors
/// relative input paths.
pub fn run_loaded(cfg: &ExperimentConfig, config_text: &str, base: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut timings: Vec<(&'static str, f64)> = Vec::new();
    let mut timed = |stage: &'static str, t0: Instant| {
        timings.push((stage, t0.elapsed().as_secs_f64()));
    };

    let t0 = Instant::now();
    let fixed = cfg.phantom.build(base).map_err(|e| e.in_stage("phantom"))?;
    let grid = *fixed.grid();
    let truth = cfg
        .truth
        .build(&grid, base)
        .map_err(|e| e.in_stage("truth"))?;
    let geometry = cfg
        .geometry
        .build(&grid)
        .map_err(|e| e.in_stage("geometry"))?;
    timed("setup", t0);

    let t0 = Instant::now();
    let (p1, p2) = simulate_pair(&fixed, &truth, &geometry, cfg.noise.as_ref())
        .map_err(|e| e.in_stage("simulate"))?;
    timed("simulate", t0);

    let t0 = Instant::now();
    let mut result = match &cfg.method {
        MethodConfig::Sequential(o) => pipeline::sequential(&p1, &p2, &grid, o),
        MethodConfig::Iterative(o) => pipeline::iterative(&p1, &p2, &grid, o),
        MethodConfig::Simultaneous(o) => pipeline::simultaneous(&p1, &p2, &grid, o),
    }?;
    timed("solve", t0);

    let t0 = Instant::now();
    attach_metrics(&mut result, &fixed, &truth, &cfg.method)
        .map_err(|e| e.in_stage("metrics"))?;
    timed("metrics", t0);

    let t0 = Instant::now();
    let dir = cfg.output_dir.clone();
    create_output_dir(&dir)?;
    write_text(dir.join("config.toml"), &config_text_normalized(config_text))?;
    save_volume(dir.join("phantom.txt"), &fixed, Scalar::F64)?;
    save_stack(dir.join("projections_fixed.txt"), &p1, Scalar::F64)?;
    save_stack(dir.join("projections_moving.txt"), &p2, Scalar::F64)?;
    save_transform(dir.join("truth_transform.txt"), &truth)?;
    write_result_artifacts(&dir, &result)?;
    timed("write", t0);

    write_text(
        dir.join("manifest.txt"),
        &manifest(config_text, cfg, &result, &timings),
    )?;

    Ok(RunSummary {
        output_dir: dir,
        result,
        timings,
    })
}

/// The stored copy always ends with a newline; the hash in the manifest is
/// of the original text, so keep the original bytes when they already do.
fn config_text_normalized(text: &str) -> String {
    if text.ends_with('\n') {
        text.to_string()
    } else {
        format!("{text}\n")
    }
}
