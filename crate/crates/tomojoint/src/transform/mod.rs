//! Spatial transform models and the resampling operators built on them.
//!
//! Both models map physical lab coordinates to physical lab coordinates.
//! Warping is backward (pull): output voxel x holds the moving image
//! sampled at T(x), trilinear over the image embedded in a zero
//! background, so samples fade to the padding value 0 across one boundary
//! voxel and read 0 beyond it. The adjoint scatters the identical weights,
//! so the warp/adjoint pair passes a dot-product test to roundoff.

mod affine;
mod bspline;

pub use affine::{affine_build, AffineTransform, AFFINE_IDENTITY};
pub use bspline::{basis, basis_deriv, BSplineTransform};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridSpec, Volume};
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Which parametric family to fit; the B-spline lattice is sized for the
/// target grid when the initial transform is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransformModel {
    Affine,
    BSpline { interior_dims: [usize; 3] },
}

impl TransformModel {
    /// Identity member of the family: identity matrix, or all-zero
    /// coefficients on a lattice covering `grid`.
    pub fn initial(&self, grid: &GridSpec) -> Result<Transform> {
        match self {
            TransformModel::Affine => Ok(Transform::Affine(AffineTransform::identity())),
            TransformModel::BSpline { interior_dims } => Ok(Transform::BSpline(
                BSplineTransform::for_grid(grid, *interior_dims)?,
            )),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TransformModel::Affine => "affine",
            TransformModel::BSpline { .. } => "bspline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Affine(AffineTransform),
    BSpline(BSplineTransform),
}

impl Transform {
    pub fn identity() -> Transform {
        Transform::Affine(AffineTransform::identity())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Transform::Affine(_) => "affine",
            Transform::BSpline(_) => "bspline",
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Transform::Affine(a) => a.is_identity(),
            Transform::BSpline(b) => b.is_identity(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Transform::Affine(_) => 12,
            Transform::BSpline(b) => b.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Transform::Affine(a) => a.params().to_vec(),
            Transform::BSpline(b) => b.coeffs().to_vec(),
        }
    }

    /// Same model with a replaced parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Result<Transform> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "transform parameters must be finite".into(),
            ));
        }
        match self {
            Transform::Affine(_) => {
                let mut p = [0.0f64; 12];
                p.copy_from_slice(params);
                Ok(Transform::Affine(AffineTransform::from_params(p)?))
            }
            Transform::BSpline(b) => {
                let mut nb = b.clone();
                nb.coeffs_mut().copy_from_slice(params);
                Ok(Transform::BSpline(nb))
            }
        }
    }

    /// Mapped position of a physical point.
    pub fn apply(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        match self {
            Transform::Affine(a) => Ok(a.apply(p)),
            Transform::BSpline(b) => b.apply(p),
        }
    }

    /// T(p) - p.
    pub fn displacement(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let y = self.apply(p)?;
        Ok([y[0] - p[0], y[1] - p[1], y[2] - p[2]])
    }
}

fn check_domain(t: &Transform, grid: &GridSpec) -> Result<()> {
    if let Transform::BSpline(b) = t {
        if !b.covers(grid) {
            return Err(Error::ShapeMismatch(
                "volume grid extends beyond the spline lattice domain".into(),
            ));
        }
    }
    Ok(())
}

fn check_warpable(f: &Volume, t: &Transform) -> Result<()> {
    if f.dims().iter().any(|&n| n < 2) {
        return Err(Error::DimensionTooSmall(
            "warping needs at least 2 voxels per axis".into(),
        ));
    }
    check_domain(t, f.grid())
}

/// Mapped point for a voxel center; domain coverage was checked upfront.
#[inline]
fn map_point(t: &Transform, p: [f64; 3]) -> [f64; 3] {
    match t {
        Transform::Affine(a) => a.apply(p),
        Transform::BSpline(b) => {
            let (cell, w) = b.setup(p).expect("lattice covers the grid");
            let d = b.displacement_at(cell, &w);
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        }
    }
}

/// Interpolation cell and in-cell fractions for physical point y, or None
/// when the sample is identically zero. The image is read as if embedded
/// in an infinite zero background: the cell may reach one ring of virtual
/// zero voxels just outside the grid, so the interpolant falls to zero
/// linearly across the boundary voxel instead of jumping. A jump there
/// would make every transform objective discontinuous in its parameters
/// the moment a reconstruction with nonzero edge voxels crosses the edge,
/// which in turn poisons difference-quotient gradients with O(1/eps)
/// spikes and stalls the line search.
#[inline]
fn trilinear_setup(grid: &GridSpec, y: [f64; 3]) -> Option<([isize; 3], [f64; 3])> {
    let mut cell = [0isize; 3];
    let mut fr = [0.0f64; 3];
    for ax in 0..3 {
        let u = (y[ax] - grid.origin_mm[ax]) / grid.spacing_mm[ax];
        if !(u > -1.0 && u < grid.dims[ax] as f64) {
            return None;
        }
        let c = u.floor() as isize;
        cell[ax] = c;
        fr[ax] = u - c as f64;
    }
    Some((cell, fr))
}

/// Cell as in-range indices when all 8 corners are real voxels.
#[inline]
fn interior_cell(grid: &GridSpec, cell: [isize; 3]) -> Option<[usize; 3]> {
    let mut c = [0usize; 3];
    for ax in 0..3 {
        if cell[ax] < 0 || cell[ax] + 1 >= grid.dims[ax] as isize {
            return None;
        }
        c[ax] = cell[ax] as usize;
    }
    Some(c)
}

#[inline]
fn corner_base(grid: &GridSpec, cell: [usize; 3]) -> (usize, usize, usize) {
    let nx = grid.dims[0];
    let ny = grid.dims[1];
    ((cell[2] * ny + cell[1]) * nx + cell[0], nx, nx * ny)
}

#[inline]
fn gather(data: &[f64], grid: &GridSpec, cell: [isize; 3], fr: [f64; 3]) -> f64 {
    let Some(cell) = interior_cell(grid, cell) else {
        return gather_edge(data, grid, cell, fr);
    };
    let (base, sy, sz) = corner_base(grid, cell);
    let wx = [1.0 - fr[0], fr[0]];
    let wy = [1.0 - fr[1], fr[1]];
    let wz = [1.0 - fr[2], fr[2]];
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            let w = wz[dz] * wy[dy];
            let row = base + dz * sz + dy * sy;
            acc += w * (wx[0] * data[row] + wx[1] * data[row + 1]);
        }
    }
    acc
}

/// Slow path for cells touching the zero padding: virtual corners are
/// skipped, which is the same as multiplying their weight by zero.
#[cold]
fn gather_edge(data: &[f64], grid: &GridSpec, cell: [isize; 3], fr: [f64; 3]) -> f64 {
    let w = [[1.0 - fr[0], fr[0]], [1.0 - fr[1], fr[1]], [1.0 - fr[2], fr[2]]];
    let [nx, ny, nz] = grid.dims.map(|n| n as isize);
    let mut acc = 0.0;
    for dz in 0..2usize {
        let kz = cell[2] + dz as isize;
        if kz < 0 || kz >= nz {
            continue;
        }
        for dy in 0..2usize {
            let ky = cell[1] + dy as isize;
            if ky < 0 || ky >= ny {
                continue;
            }
            let wyz = w[1][dy] * w[2][dz];
            for dx in 0..2usize {
                let kx = cell[0] + dx as isize;
                if kx < 0 || kx >= nx {
                    continue;
                }
                acc += w[0][dx] * wyz * data[((kz * ny + ky) * nx + kx) as usize];
            }
        }
    }
    acc
}

/// Sample value plus the exact spatial derivative of the trilinear
/// interpolant, in intensity per mm. In the padding fade the derivative is
/// the slope toward zero.
#[inline]
fn gather_with_grad(
    data: &[f64],
    grid: &GridSpec,
    cell: [isize; 3],
    fr: [f64; 3],
) -> (f64, [f64; 3]) {
    let Some(cell) = interior_cell(grid, cell) else {
        return gather_with_grad_edge(data, grid, cell, fr);
    };
    let (base, sy, sz) = corner_base(grid, cell);
    let wx = [1.0 - fr[0], fr[0]];
    let wy = [1.0 - fr[1], fr[1]];
    let wz = [1.0 - fr[2], fr[2]];
    let mut val = 0.0;
    let mut g = [0.0f64; 3];
    for dz in 0..2 {
        let swz = if dz == 0 { -1.0 } else { 1.0 };
        for dy in 0..2 {
            let swy = if dy == 0 { -1.0 } else { 1.0 };
            let row = base + dz * sz + dy * sy;
            let f0 = data[row];
            let f1 = data[row + 1];
            let wyz = wy[dy] * wz[dz];
            val += wyz * (wx[0] * f0 + wx[1] * f1);
            g[0] += wyz * (f1 - f0);
            g[1] += swy * wz[dz] * (wx[0] * f0 + wx[1] * f1);
            g[2] += swz * wy[dy] * (wx[0] * f0 + wx[1] * f1);
        }
    }
    for ax in 0..3 {
        g[ax] /= grid.spacing_mm[ax];
    }
    (val, g)
}

#[cold]
fn gather_with_grad_edge(
    data: &[f64],
    grid: &GridSpec,
    cell: [isize; 3],
    fr: [f64; 3],
) -> (f64, [f64; 3]) {
    let w = [[1.0 - fr[0], fr[0]], [1.0 - fr[1], fr[1]], [1.0 - fr[2], fr[2]]];
    let [nx, ny, nz] = grid.dims.map(|n| n as isize);
    let mut val = 0.0;
    let mut g = [0.0f64; 3];
    for dz in 0..2usize {
        let kz = cell[2] + dz as isize;
        if kz < 0 || kz >= nz {
            continue;
        }
        let sz = if dz == 0 { -1.0 } else { 1.0 };
        for dy in 0..2usize {
            let ky = cell[1] + dy as isize;
            if ky < 0 || ky >= ny {
                continue;
            }
            let sy = if dy == 0 { -1.0 } else { 1.0 };
            for dx in 0..2usize {
                let kx = cell[0] + dx as isize;
                if kx < 0 || kx >= nx {
                    continue;
                }
                let sx = if dx == 0 { -1.0 } else { 1.0 };
                let f = data[((kz * ny + ky) * nx + kx) as usize];
                val += w[0][dx] * w[1][dy] * w[2][dz] * f;
                g[0] += sx * w[1][dy] * w[2][dz] * f;
                g[1] += w[0][dx] * sy * w[2][dz] * f;
                g[2] += w[0][dx] * w[1][dy] * sz * f;
            }
        }
    }
    for ax in 0..3 {
        g[ax] /= grid.spacing_mm[ax];
    }
    (val, g)
}

#[inline]
fn scatter(acc: &mut [f64], grid: &GridSpec, cell: [isize; 3], fr: [f64; 3], v: f64) {
    let Some(cell) = interior_cell(grid, cell) else {
        scatter_edge(acc, grid, cell, fr, v);
        return;
    };
    let (base, sy, sz) = corner_base(grid, cell);
    let wx = [1.0 - fr[0], fr[0]];
    let wy = [1.0 - fr[1], fr[1]];
    let wz = [1.0 - fr[2], fr[2]];
    for dz in 0..2 {
        for dy in 0..2 {
            let w = wz[dz] * wy[dy] * v;
            let row = base + dz * sz + dy * sy;
            acc[row] += w * wx[0];
            acc[row + 1] += w * wx[1];
        }
    }
}

#[cold]
fn scatter_edge(acc: &mut [f64], grid: &GridSpec, cell: [isize; 3], fr: [f64; 3], v: f64) {
    let w = [[1.0 - fr[0], fr[0]], [1.0 - fr[1], fr[1]], [1.0 - fr[2], fr[2]]];
    let [nx, ny, nz] = grid.dims.map(|n| n as isize);
    for dz in 0..2usize {
        let kz = cell[2] + dz as isize;
        if kz < 0 || kz >= nz {
            continue;
        }
        for dy in 0..2usize {
            let ky = cell[1] + dy as isize;
            if ky < 0 || ky >= ny {
                continue;
            }
            let wyz = w[1][dy] * w[2][dz] * v;
            for dx in 0..2usize {
                let kx = cell[0] + dx as isize;
                if kx < 0 || kx >= nx {
                    continue;
                }
                acc[((kz * ny + ky) * nx + kx) as usize] += w[0][dx] * wyz;
            }
        }
    }
}

#[inline]
fn decode(grid: &GridSpec, idx: usize) -> [f64; 3] {
    let nx = grid.dims[0];
    let ny = grid.dims[1];
    let i = idx % nx;
    let j = (idx / nx) % ny;
    let k = idx / (nx * ny);
    grid.voxel_center(i, j, k)
}

/// Resample `f` through `t`: output voxel x reads f at T(x).
pub fn warp(f: &Volume, t: &Transform) -> Result<Volume> {
    if t.is_identity() {
        return Ok(f.clone());
    }
    check_warpable(f, t)?;
    let grid = *f.grid();
    let data = f.data();
    let nx = grid.dims[0];
    let mut out = vec![0.0f64; f.num_voxels()];

    let row_job = |row_idx: usize, row: &mut [f64]| {
        for (i, o) in row.iter_mut().enumerate() {
            let p = decode(&grid, row_idx * nx + i);
            let y = map_point(t, p);
            *o = match trilinear_setup(&grid, y) {
                Some((cell, fr)) => gather(data, &grid, cell, fr),
                None => 0.0,
            };
        }
    };

    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            out.par_chunks_mut(nx)
                .enumerate()
                .for_each(|(r, row)| row_job(r, row));
        } else {
            out.chunks_mut(nx)
                .enumerate()
                .for_each(|(r, row)| row_job(r, row));
        }
    }
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(nx)
        .enumerate()
        .for_each(|(r, row)| row_job(r, row));

    Ok(Volume::from_parts(grid, out))
}

/// Adjoint of `warp` in its volume argument: scatters each sample of `v`
/// back to the source voxels with the same trilinear weights.
///
/// Scatter chunks are fixed-size and reduced in chunk order, so results are
/// bit-identical whether or not the parallel path runs.
pub fn warp_adjoint(v: &Volume, t: &Transform) -> Result<Volume> {
    if t.is_identity() {
        return Ok(v.clone());
    }
    check_warpable(v, t)?;
    let grid = *v.grid();
    let data = v.data();
    let n = v.num_voxels();
    let chunk = par::scatter_chunk_len(n);

    let chunk_job = |c: usize| -> Vec<f64> {
        let mut acc = vec![0.0f64; n];
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        for idx in lo..hi {
            let p = decode(&grid, idx);
            let y = map_point(t, p);
            if let Some((cell, fr)) = trilinear_setup(&grid, y) {
                scatter(&mut acc, &grid, cell, fr, data[idx]);
            }
        }
        acc
    };

    let n_chunks = n.div_ceil(chunk);
    let partials: Vec<Vec<f64>>;
    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            partials = (0..n_chunks).into_par_iter().map(chunk_job).collect();
        } else {
            partials = (0..n_chunks).map(chunk_job).collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = (0..n_chunks).map(chunk_job).collect();
    }

    let mut out = vec![0.0f64; n];
    for part in &partials {
        for (o, x) in out.iter_mut().zip(part) {
            *o += x;
        }
    }
    Ok(Volume::from_parts(grid, out))
}

/// Per-axis image gradient: central differences interior, one-sided at the
/// boundary faces, in intensity per mm.
pub fn image_gradient(f: &Volume) -> Result<[Volume; 3]> {
    if f.dims().iter().any(|&n| n < 2) {
        return Err(Error::DimensionTooSmall(
            "image gradient needs at least 2 voxels per axis".into(),
        ));
    }
    let grid = *f.grid();
    let [nx, ny, nz] = grid.dims;
    let d = f.data();
    let mut out = [
        vec![0.0f64; d.len()],
        vec![0.0f64; d.len()],
        vec![0.0f64; d.len()],
    ];
    let stride = [1usize, nx, nx * ny];
    let dims = [nx, ny, nz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = (k * ny + j) * nx + i;
                let pos = [i, j, k];
                for ax in 0..3 {
                    let h = grid.spacing_mm[ax];
                    let s = stride[ax];
                    let n = dims[ax];
                    out[ax][idx] = if pos[ax] == 0 {
                        (d[idx + s] - d[idx]) / h
                    } else if pos[ax] == n - 1 {
                        (d[idx] - d[idx - s]) / h
                    } else {
                        (d[idx + s] - d[idx - s]) / (2.0 * h)
                    };
                }
            }
        }
    }
    let [gx, gy, gz] = out;
    Ok([
        Volume::from_parts(grid, gx),
        Volume::from_parts(grid, gy),
        Volume::from_parts(grid, gz),
    ])
}

enum GradScale<'a> {
    /// Residual warp(moving,t) - fixed; also accumulates the SSD value.
    Residual(&'a [f64]),
    /// Externally supplied per-voxel weights.
    Weights(&'a [f64]),
}

/// Chain-rule accumulation shared by the registration gradient and the
/// analytic transform-parameter gradients: for each voxel x with scalar
/// s(x), adds s(x) * grad_moving(T(x)) * dT(x)/dparam into the output.
fn param_chain_gradient(
    moving: &Volume,
    t: &Transform,
    scale: GradScale<'_>,
) -> Result<(f64, Vec<f64>)> {
    check_warpable(moving, t)?;
    let grid = *moving.grid();
    let data = moving.data();
    let n = moving.num_voxels();
    let n_params = t.num_params();
    let chunk = par::scatter_chunk_len(n);
    let n_chunks = n.div_ceil(chunk);

    let scale_ref = &scale;
    let chunk_job = |c: usize| -> (f64, Vec<f64>) {
        let mut grad = vec![0.0f64; n_params];
        let mut value = 0.0f64;
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        for idx in lo..hi {
            let p = decode(&grid, idx);
            let (sample, g) = match t {
                Transform::Affine(a) => {
                    let y = a.apply(p);
                    match trilinear_setup(&grid, y) {
                        Some((cell, fr)) => gather_with_grad(data, &grid, cell, fr),
                        None => (0.0, [0.0; 3]),
                    }
                }
                Transform::BSpline(b) => {
                    let (bc, bw) = b.setup(p).expect("lattice covers the grid");
                    let dsp = b.displacement_at(bc, &bw);
                    let y = [p[0] + dsp[0], p[1] + dsp[1], p[2] + dsp[2]];
                    match trilinear_setup(&grid, y) {
                        Some((cell, fr)) => gather_with_grad(data, &grid, cell, fr),
                        None => (0.0, [0.0; 3]),
                    }
                }
            };
            let s = match scale_ref {
                GradScale::Residual(fixed) => {
                    let r = sample - fixed[idx];
                    value += 0.5 * r * r;
                    r
                }
                GradScale::Weights(w) => w[idx],
            };
            if s == 0.0 || (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) {
                continue;
            }
            match t {
                Transform::Affine(_) => {
                    for r in 0..3 {
                        let sr = s * g[r];
                        grad[4 * r] += sr * p[0];
                        grad[4 * r + 1] += sr * p[1];
                        grad[4 * r + 2] += sr * p[2];
                        grad[4 * r + 3] += sr;
                    }
                }
                Transform::BSpline(b) => {
                    let (bc, bw) = b.setup(p).expect("lattice covers the grid");
                    let lat = b.control_dims();
                    for dk in 0..4 {
                        let kk = bc[2] - 1 + dk;
                        for dj in 0..4 {
                            let jj = bc[1] - 1 + dj;
                            let wjk = bw[1][dj] * bw[2][dk];
                            let row = (kk * lat[1] + jj) * lat[0] + bc[0] - 1;
                            for di in 0..4 {
                                let wt = bw[0][di] * wjk * s;
                                let base = 3 * (row + di);
                                grad[base] += wt * g[0];
                                grad[base + 1] += wt * g[1];
                                grad[base + 2] += wt * g[2];
                            }
                        }
                    }
                }
            }
        }
        (value, grad)
    };

    let partials: Vec<(f64, Vec<f64>)>;
    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            partials = (0..n_chunks).into_par_iter().map(chunk_job).collect();
        } else {
            partials = (0..n_chunks).map(chunk_job).collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = (0..n_chunks).map(chunk_job).collect();
    }

    let mut grad = vec![0.0f64; n_params];
    let mut value = 0.0f64;
    for (v, g) in &partials {
        value += v;
        for (o, x) in grad.iter_mut().zip(g) {
            *o += x;
        }
    }
    Ok((value, grad))
}

/// SSD value 0.5*||warp(moving,t) - fixed||^2 together with its gradient
/// with respect to t's parameters.
///
/// The spatial derivative is the exact derivative of the trilinear
/// interpolant of the original moving image at the transformed coordinates,
/// which keeps the pair consistent to finite-difference accuracy.
pub fn registration_value_and_gradient(
    fixed: &Volume,
    moving: &Volume,
    t: &Transform,
) -> Result<(f64, Vec<f64>)> {
    if !fixed.same_grid(moving) {
        return Err(Error::ShapeMismatch(
            "fixed and moving volumes must share a grid".into(),
        ));
    }
    param_chain_gradient(moving, t, GradScale::Residual(fixed.data()))
}

/// Gradient of the SSD registration objective with respect to t's
/// parameters.
pub fn registration_gradient(fixed: &Volume, moving: &Volume, t: &Transform) -> Result<Vec<f64>> {
    registration_value_and_gradient(fixed, moving, t).map(|(_, g)| g)
}

/// Parameter gradient with the data-fidelity part already folded into
/// per-voxel weights: returns sum_x w(x) * grad_f(T(x)) * dT(x)/dparam.
/// With w = A^T r this is the exact transform gradient of
/// 0.5*||A warp(f,t) - p||^2.
pub(crate) fn weighted_param_gradient(
    f: &Volume,
    t: &Transform,
    weights: &[f64],
) -> Result<Vec<f64>> {
    if weights.len() != f.num_voxels() {
        return Err(Error::ShapeMismatch(format!(
            "weight slice holds {} entries for {} voxels",
            weights.len(),
            f.num_voxels()
        )));
    }
    param_chain_gradient(f, t, GradScale::Weights(weights)).map(|(_, g)| g)
}

/// SSD value alone, evaluated without building the warped volume.
pub fn registration_value(fixed: &Volume, moving: &Volume, t: &Transform) -> Result<f64> {
    if !fixed.same_grid(moving) {
        return Err(Error::ShapeMismatch(
            "fixed and moving volumes must share a grid".into(),
        ));
    }
    check_warpable(moving, t)?;
    let grid = *moving.grid();
    let data = moving.data();
    let fx = fixed.data();
    let n = moving.num_voxels();
    let nx = grid.dims[0];

    let row_job = |row_idx: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..nx {
            let idx = row_idx * nx + i;
            let p = decode(&grid, idx);
            let y = map_point(t, p);
            let sample = match trilinear_setup(&grid, y) {
                Some((cell, fr)) => gather(data, &grid, cell, fr),
                None => 0.0,
            };
            let r = sample - fx[idx];
            acc += 0.5 * r * r;
        }
        acc
    };

    let rows = n / nx;
    let value: f64;
    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            // Order-independent only up to roundoff; sum partials in row
            // order to keep parallel and sequential bits identical.
            let partials: Vec<f64> = (0..rows).into_par_iter().map(row_job).collect();
            value = partials.iter().sum();
        } else {
            value = (0..rows).map(row_job).sum();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        value = (0..rows).map(row_job).sum();
    }
    Ok(value)
}

/// Analytic derivative of warp(f,t) with respect to a single parameter:
/// per voxel, grad_f(T(x)) dotted with dT(x)/dparam.
pub fn warp_parameter_derivative(f: &Volume, t: &Transform, param: usize) -> Result<Volume> {
    if param >= t.num_params() {
        return Err(Error::IndexOutOfRange {
            index: param,
            limit: t.num_params(),
        });
    }
    check_warpable(f, t)?;
    let grid = *f.grid();
    let data = f.data();
    let n = f.num_voxels();
    let mut out = vec![0.0f64; n];
    for (idx, o) in out.iter_mut().enumerate() {
        let p = decode(&grid, idx);
        let y = map_point(t, p);
        let g = match trilinear_setup(&grid, y) {
            Some((cell, fr)) => gather_with_grad(data, &grid, cell, fr).1,
            None => [0.0; 3],
        };
        *o = match t {
            Transform::Affine(_) => {
                let r = param / 4;
                let c = param % 4;
                let factor = if c < 3 { p[c] } else { 1.0 };
                g[r] * factor
            }
            Transform::BSpline(b) => {
                let node = param / 3;
                let comp = param % 3;
                let (bc, bw) = b.setup(p).expect("lattice covers the grid");
                let lat = b.control_dims();
                let mut w = 0.0;
                for dk in 0..4 {
                    let kk = bc[2] - 1 + dk;
                    for dj in 0..4 {
                        let jj = bc[1] - 1 + dj;
                        let row = (kk * lat[1] + jj) * lat[0] + bc[0] - 1;
                        if node >= row && node < row + 4 {
                            w += bw[0][node - row] * bw[1][dj] * bw[2][dk];
                        }
                    }
                }
                g[comp] * w
            }
        };
    }
    Ok(Volume::from_parts(grid, out))
}

/// Central-difference derivative of warp(f,t) with respect to one
/// parameter: (warp at param+eps minus warp at param-eps) / (2 eps).
pub fn fdm_transform_derivative(
    f: &Volume,
    t: &Transform,
    param: usize,
    eps: f64,
) -> Result<Volume> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "fdm step must be positive and finite, got {eps}"
        )));
    }
    if param >= t.num_params() {
        return Err(Error::IndexOutOfRange {
            index: param,
            limit: t.num_params(),
        });
    }
    let mut params = t.params();
    params[param] += eps;
    let plus = warp(f, &t.with_params(&params)?)?;
    params[param] -= 2.0 * eps;
    let minus = warp(f, &t.with_params(&params)?)?;
    let inv = 0.5 / eps;
    let data = plus
        .data()
        .iter()
        .zip(minus.data())
        .map(|(a, b)| (a - b) * inv)
        .collect();
    Ok(Volume::from_parts(*f.grid(), data))
}

/// Displacement T(x) - x probed at a set of physical points.
pub fn probe_displacements(t: &Transform, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    points.iter().map(|&p| t.displacement(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let grid = GridSpec::centered(dims, [1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.num_voxels())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Volume::new(grid, data).unwrap()
    }

    fn translation(d: [f64; 3]) -> Transform {
        Transform::Affine(affine_build(d, [0.0; 3], [1.0; 3], [0.0; 3]).unwrap())
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let f = random_volume([7, 6, 5], 3);
        let w = warp(&f, &Transform::identity()).unwrap();
        assert_eq!(f.data(), w.data());
        let a = warp_adjoint(&f, &Transform::identity()).unwrap();
        assert_eq!(f.data(), a.data());
    }

    #[test]
    fn integer_translation_shifts_an_impulse() {
        // Pull convention: out(x) = f(T(x)), so translation by +d moves the
        // impulse to v - d.
        let grid = GridSpec::centered([9, 9, 9], [1.0, 1.0, 1.0]);
        let mut data = vec![0.0; grid.num_voxels()];
        let at = |i: usize, j: usize, k: usize| (k * 9 + j) * 9 + i;
        data[at(4, 4, 4)] = 1.0;
        let f = Volume::new(grid, data).unwrap();
        let w = warp(&f, &translation([2.0, 0.0, -1.0])).unwrap();
        assert_eq!(w.data()[at(2, 4, 5)], 1.0);
        assert_eq!(w.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn warp_outside_domain_pads_zero() {
        let grid = GridSpec::centered([4, 4, 4], [1.0, 1.0, 1.0]);
        let f = Volume::new(grid, vec![5.0; 64]).unwrap();
        let w = warp(&f, &translation([10.0, 0.0, 0.0])).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_dot_product_identity_affine() {
        let t = Transform::Affine(
            affine_build([1.3, -0.7, 0.4], [8.0, -5.0, 12.0], [1.05, 0.97, 1.0], [0.02, 0.0, -0.03])
                .unwrap(),
        );
        let f = random_volume([12, 12, 12], 21);
        let h = random_volume([12, 12, 12], 22);
        let wf = warp(&f, &t).unwrap();
        let ah = warp_adjoint(&h, &t).unwrap();
        let lhs = crate::volume::dot(wf.data(), h.data());
        let rhs = crate::volume::dot(f.data(), ah.data());
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn adjoint_dot_product_identity_bspline() {
        let grid = GridSpec::centered([12, 12, 12], [1.0, 1.0, 1.0]);
        let mut b = BSplineTransform::for_grid(&grid, [4, 4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in b.coeffs_mut() {
            *c = rng.random_range(-0.8..0.8);
        }
        let t = Transform::BSpline(b);
        let f = random_volume([12, 12, 12], 31);
        let h = random_volume([12, 12, 12], 32);
        let lhs = crate::volume::dot(warp(&f, &t).unwrap().data(), h.data());
        let rhs = crate::volume::dot(f.data(), warp_adjoint(&h, &t).unwrap().data());
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn image_gradient_of_ramp_is_constant() {
        let grid = GridSpec::centered([6, 5, 4], [1.0, 1.0, 1.0]);
        let mut data = vec![0.0; grid.num_voxels()];
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..6 {
                    data[(k * 5 + j) * 6 + i] = 2.0 * grid.voxel_center(i, j, k)[0];
                }
            }
        }
        let f = Volume::new(grid, data).unwrap();
        let [gx, gy, gz] = image_gradient(&f).unwrap();
        assert!(gx.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(gy.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(gz.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn image_gradient_needs_two_voxels() {
        let grid = GridSpec::centered([1, 5, 5], [1.0, 1.0, 1.0]);
        let f = Volume::new(grid, vec![0.0; 25]).unwrap();
        assert!(matches!(
            image_gradient(&f),
            Err(Error::DimensionTooSmall(_))
        ));
    }

    #[test]
    fn registration_gradient_zero_at_aligned_identity() {
        let f = random_volume([8, 8, 8], 40);
        let (val, g) =
            registration_value_and_gradient(&f, &f, &Transform::identity()).unwrap();
        assert_eq!(val, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn registration_value_matches_warped_residual() {
        let f = random_volume([10, 9, 8], 41);
        let m = random_volume([10, 9, 8], 42);
        let t = Transform::Affine(
            affine_build([0.6, -0.4, 0.9], [4.0, 7.0, -3.0], [1.0; 3], [0.0; 3]).unwrap(),
        );
        let w = warp(&m, &t).unwrap();
        let direct: f64 = w
            .data()
            .iter()
            .zip(f.data())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum();
        let v1 = registration_value(&f, &m, &t).unwrap();
        let (v2, _) = registration_value_and_gradient(&f, &m, &t).unwrap();
        assert!((v1 - direct).abs() <= 1e-12 * (1.0 + direct));
        assert!((v2 - direct).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn fdm_rejects_bad_step() {
        let f = random_volume([6, 6, 6], 50);
        let t = Transform::identity();
        assert!(fdm_transform_derivative(&f, &t, 3, 0.0).is_err());
        assert!(fdm_transform_derivative(&f, &t, 99, 1e-3).is_err());
    }

    #[test]
    fn fdm_of_constant_volume_vanishes_in_the_interior() {
        // Boundary voxels see the zero padding move; interior ones sample
        // the constant on both sides and cancel exactly.
        let grid = GridSpec::centered([8, 8, 8], [1.0, 1.0, 1.0]);
        let f = Volume::new(grid, vec![4.0; 512]).unwrap();
        for param in [3usize, 7, 11] {
            let d = fdm_transform_derivative(&f, &Transform::identity(), param, 1e-3).unwrap();
            for k in 1..7 {
                for j in 1..7 {
                    for i in 1..7 {
                        let v = d.data()[(k * 8 + j) * 8 + i];
                        assert!(v.abs() <= 1e-8, "param {param} voxel ({i},{j},{k}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn fdm_of_ramp_matches_pull_convention_sign() {
        // f = 2x and T = x + t: out(x) = 2(x + t), so d out / d t = +2.
        let grid = GridSpec::centered([8, 8, 8], [1.0, 1.0, 1.0]);
        let mut data = vec![0.0; 512];
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    data[(k * 8 + j) * 8 + i] = 2.0 * grid.voxel_center(i, j, k)[0];
                }
            }
        }
        let f = Volume::new(grid, data).unwrap();
        let d = fdm_transform_derivative(&f, &Transform::identity(), 3, 1e-3).unwrap();
        for k in 1..7 {
            for j in 1..7 {
                for i in 1..7 {
                    let v = d.data()[(k * 8 + j) * 8 + i];
                    assert!((v - 2.0).abs() < 1e-9, "voxel ({i},{j},{k}) = {v}");
                }
            }
        }
    }

    #[test]
    fn fdm_matches_analytic_parameter_derivative() {
        // The step must stay well below every mapped point's distance to a
        // cell face: the interpolant is piecewise linear along each
        // parameter, so away from faces the central difference is exact,
        // while straddling a face mixes the slopes of two cells.
        let f = random_volume([10, 10, 10], 60);
        let t = Transform::Affine(
            affine_build([0.8, -0.3, 0.5], [3.0, -6.0, 2.0], [1.02, 0.98, 1.0], [0.01, 0.0, 0.0])
                .unwrap(),
        );
        for param in [0usize, 3, 5, 7, 10, 11] {
            let fdm = fdm_transform_derivative(&f, &t, param, 1e-5).unwrap();
            let ana = warp_parameter_derivative(&f, &t, param).unwrap();
            let scale: f64 = ana.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            let err: f64 = fdm
                .data()
                .iter()
                .zip(ana.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err / scale < 1e-5, "param {param}: err {err} scale {scale}");
        }
    }

    #[test]
    fn with_params_round_trips() {
        let t = Transform::identity();
        let mut p = t.params();
        p[3] = 2.5;
        let t2 = t.with_params(&p).unwrap();
        assert_eq!(t2.params()[3], 2.5);
        assert!(t.with_params(&p[..5]).is_err());
    }

    #[test]
    fn bspline_warp_rejects_foreign_grid() {
        let grid = GridSpec::centered([12, 12, 12], [1.0, 1.0, 1.0]);
        let b = BSplineTransform::for_grid(&grid, [4, 4, 4]).unwrap();
        let big = GridSpec::centered([20, 20, 20], [1.0, 1.0, 1.0]);
        let f = Volume::new(big, vec![1.0; big.num_voxels()]).unwrap();
        let mut t = Transform::BSpline(b);
        // Zero coefficients short-circuit to identity; perturb one to force
        // the domain check.
        let mut p = t.params();
        p[0] = 0.1;
        t = t.with_params(&p).unwrap();
        assert!(matches!(warp(&f, &t), Err(Error::ShapeMismatch(_))));
    }
}
