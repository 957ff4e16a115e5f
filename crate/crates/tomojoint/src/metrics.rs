//! Evaluation: MSE, relative error, per-parameter errors with batch
//! statistics, line profiles, difference images.

use crate::error::{Error, Result};
use crate::transform::Transform;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub mse: f64,
    pub relative_error: f64,
    pub param_abs_error: Vec<f64>,
    pub initial_mse: f64,
}

impl MetricsSummary {
    /// key,value lines; parameter errors fan out as param_1..param_n.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mse,{:?}\n", self.mse));
        out.push_str(&format!("relative_error,{:?}\n", self.relative_error));
        out.push_str(&format!("initial_mse,{:?}\n", self.initial_mse));
        for (i, e) in self.param_abs_error.iter().enumerate() {
            out.push_str(&format!("param_{},{:?}\n", i + 1, e));
        }
        out
    }
}

fn check_same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "volume dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared voxel difference.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_same_dims(a, b)?;
    let n = a.num_voxels() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// ||result - truth||^2 / ||truth||^2.
pub fn relative_error(result: &Volume, truth: &Volume) -> Result<f64> {
    check_same_dims(result, truth)?;
    let denom = truth.norm_sq();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = result
        .data()
        .iter()
        .zip(truth.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(num / denom)
}

/// Entrywise |recovered - truth| over the parameter vectors; the models
/// must match in kind and parameter count.
pub fn param_abs_error(recovered: &Transform, truth: &Transform) -> Result<Vec<f64>> {
    if recovered.kind() != truth.kind() || recovered.num_params() != truth.num_params() {
        return Err(Error::KindMismatch(format!(
            "{} ({} params) vs {} ({} params)",
            recovered.kind(),
            recovered.num_params(),
            truth.kind(),
            truth.num_params()
        )));
    }
    Ok(recovered
        .params()
        .iter()
        .zip(truth.params())
        .map(|(a, b)| (a - b).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis3 {
    X,
    Y,
    Z,
}

/// Voxel values along `axis` with the two remaining coordinates fixed
/// (given in x,y,z order with the profiled axis skipped).
pub fn line_profile(f: &Volume, axis: Axis3, fixed: [usize; 2]) -> Result<Vec<f64>> {
    let [nx, ny, nz] = f.dims();
    let (len, check): (usize, [(usize, usize); 2]) = match axis {
        Axis3::X => (nx, [(fixed[0], ny), (fixed[1], nz)]),
        Axis3::Y => (ny, [(fixed[0], nx), (fixed[1], nz)]),
        Axis3::Z => (nz, [(fixed[0], nx), (fixed[1], ny)]),
    };
    for (idx, limit) in check {
        if idx >= limit {
            return Err(Error::IndexOutOfRange { index: idx, limit });
        }
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let (x, y, z) = match axis {
            Axis3::X => (i, fixed[0], fixed[1]),
            Axis3::Y => (fixed[0], i, fixed[1]),
            Axis3::Z => (fixed[0], fixed[1], i),
        };
        out.push(f.at(x, y, z));
    }
    Ok(out)
}

/// a - b voxelwise.
pub fn difference_image(a: &Volume, b: &Volume) -> Result<Volume> {
    check_same_dims(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Volume::from_parts(*a.grid(), data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamErrorStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation (n-1 denominator); zero for a single case.
    pub std: Vec<f64>,
    pub count: usize,
}

/// Mean and spread of per-parameter absolute errors over a batch of cases.
pub fn param_error_stats(errors: &[Vec<f64>]) -> Result<ParamErrorStats> {
    let count = errors.len();
    if count == 0 {
        return Err(Error::InvalidParameter("empty error batch".into()));
    }
    let n = errors[0].len();
    if errors.iter().any(|e| e.len() != n) {
        return Err(Error::ShapeMismatch(
            "error vectors differ in length".into(),
        ));
    }
    let mut mean = vec![0.0f64; n];
    for e in errors {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut std = vec![0.0f64; n];
    if count > 1 {
        for e in errors {
            for ((s, v), m) in std.iter_mut().zip(e).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / (count - 1) as f64).sqrt();
        }
    }
    Ok(ParamErrorStats { mean, std, count })
}

impl ParamErrorStats {
    pub fn csv(&self) -> String {
        let mut out = String::from("param,mean,std\n");
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{},{:?},{:?}\n", i + 1, m, s));
        }
        out
    }
}
