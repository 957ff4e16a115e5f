//! Oracle helpers shared by the integration suites: an explicitly assembled
//! system matrix, an independently coded warp, finite differences, and a
//! small dense linear solver. Everything here favors obviousness over
//! speed; the point is to have a second opinion that cannot share a bug
//! with the production kernels.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tomojoint::geometry::Geometry;
use tomojoint::projector::forward_project;
use tomojoint::transform::Transform;
use tomojoint::volume::{GridSpec, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(grid: &GridSpec, rng: &mut ChaCha8Rng, amplitude: f64) -> Volume {
    let data = (0..grid.num_voxels())
        .map(|_| rng.random_range(-amplitude..amplitude))
        .collect();
    Volume::new(*grid, data).unwrap()
}

/// Random volume that is zero on a border shell, so warped samples near the
/// domain edge read zero on both sides of the boundary.
pub fn compact_random_volume(
    grid: &GridSpec,
    rng: &mut ChaCha8Rng,
    amplitude: f64,
    shell: usize,
) -> Volume {
    let [nx, ny, nz] = grid.dims;
    let mut data = vec![0.0; grid.num_voxels()];
    for k in shell..nz.saturating_sub(shell) {
        for j in shell..ny.saturating_sub(shell) {
            for i in shell..nx.saturating_sub(shell) {
                data[(k * ny + j) * nx + i] = rng.random_range(-amplitude..amplitude);
            }
        }
    }
    Volume::new(*grid, data).unwrap()
}

pub fn random_stack_data(g: &Geometry, rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<f64> {
    (0..g.total_pixels())
        .map(|_| rng.random_range(-amplitude..amplitude))
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_vec_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(g, w)| g - w).collect();
    norm(&diff) / norm(want).max(1e-300)
}

/// The system matrix assembled one basis volume at a time, stored row-major
/// with one row per detector pixel.
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl DenseOperator {
    pub fn assemble(grid: &GridSpec, g: &Geometry) -> DenseOperator {
        let cols = grid.num_voxels();
        let rows = g.total_pixels();
        let mut a = vec![0.0; rows * cols];
        let mut basis = vec![0.0; cols];
        for c in 0..cols {
            basis[c] = 1.0;
            let v = Volume::new(*grid, basis.clone()).unwrap();
            let p = forward_project(&v, g).unwrap();
            for (r, &val) in p.data().iter().enumerate() {
                a[r * cols + c] = val;
            }
            basis[c] = 0.0;
        }
        DenseOperator { rows, cols, a }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(&self.a[r * self.cols..(r + 1) * self.cols], x))
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.a[r * self.cols..(r + 1) * self.cols];
            for (xc, &ac) in x.iter_mut().zip(row) {
                *xc += ac * y[r];
            }
        }
        x
    }

    /// Normal-equations matrix A^T A as a dense square matrix.
    pub fn normal_matrix(&self) -> Vec<f64> {
        let n = self.cols;
        let mut m = vec![0.0; n * n];
        for r in 0..self.rows {
            let row = &self.a[r * self.cols..(r + 1) * self.cols];
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    m[i * n + j] += row[i] * row[j];
                }
            }
        }
        m
    }
}

/// Trilinear sample of the volume embedded in a zero background, written
/// from the declared convention: index coordinates u = (p - origin)/spacing,
/// corners outside the grid read 0, so the sample fades out across one
/// boundary voxel.
pub fn reference_sample(f: &Volume, p: [f64; 3]) -> f64 {
    let grid = f.grid();
    let mut cell = [0isize; 3];
    let mut fr = [0.0f64; 3];
    for ax in 0..3 {
        let u = (p[ax] - grid.origin_mm[ax]) / grid.spacing_mm[ax];
        let c = u.floor() as isize;
        cell[ax] = c;
        fr[ax] = u - c as f64;
    }
    let [nx, ny, nz] = grid.dims.map(|n| n as isize);
    let at = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= nx || j >= ny || k >= nz {
            return 0.0;
        }
        f.data()[((k * ny + j) * nx + i) as usize]
    };
    let mut acc = 0.0;
    for dz in 0..2isize {
        let wz = if dz == 0 { 1.0 - fr[2] } else { fr[2] };
        for dy in 0..2isize {
            let wy = if dy == 0 { 1.0 - fr[1] } else { fr[1] };
            for dx in 0..2isize {
                let wx = if dx == 0 { 1.0 - fr[0] } else { fr[0] };
                acc += wx * wy * wz * at(cell[0] + dx, cell[1] + dy, cell[2] + dz);
            }
        }
    }
    acc
}

/// Cardinal cubic B-spline kernel.
pub fn beta3(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        2.0 / 3.0 - t * t + t * t * t / 2.0
    } else if t < 2.0 {
        let u = 2.0 - t;
        u * u * u / 6.0
    } else {
        0.0
    }
}

/// Point map evaluated from first principles: the raw 3x4 matrix for the
/// affine model, the cardinal-kernel sum over every stored node for the
/// lattice model.
pub fn reference_map(t: &Transform, p: [f64; 3]) -> [f64; 3] {
    match t {
        Transform::Affine(a) => {
            let m = a.params();
            [
                m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
                m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
                m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
            ]
        }
        Transform::BSpline(b) => {
            let dims = b.control_dims();
            let origin = b.origin_mm();
            let spacing = b.spacing_mm();
            let mut d = [0.0f64; 3];
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let w = beta3((p[0] - origin[0]) / spacing[0] - i as f64)
                            * beta3((p[1] - origin[1]) / spacing[1] - j as f64)
                            * beta3((p[2] - origin[2]) / spacing[2] - k as f64);
                        if w == 0.0 {
                            continue;
                        }
                        let idx = 3 * ((k * dims[1] + j) * dims[0] + i);
                        d[0] += w * b.coeffs()[idx];
                        d[1] += w * b.coeffs()[idx + 1];
                        d[2] += w * b.coeffs()[idx + 2];
                    }
                }
            }
            [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
        }
    }
}

/// warp done the slow way: map every voxel center, sample with
/// `reference_sample`.
pub fn brute_force_warp(f: &Volume, t: &Transform) -> Vec<f64> {
    let grid = f.grid();
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::with_capacity(f.num_voxels());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_center(i, j, k);
                out.push(reference_sample(f, reference_map(t, p)));
            }
        }
    }
    out
}

/// Central differences of a scalar function.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        g.push((hi - lo) / (2.0 * eps));
    }
    g
}

/// Gaussian elimination with partial pivoting; n stays small here.
pub fn dense_solve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| {
                m[r * n + col]
                    .abs()
                    .partial_cmp(&m[s * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let d = m[col * n + col];
        assert!(d.abs() > 1e-300, "singular system");
        for r in (col + 1)..n {
            let factor = m[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[col * n + col];
        for r in 0..col {
            x[r] -= m[r * n + col] * x[col];
        }
    }
    x
}

/// A generic affine with nothing aligned to the voxel lattice. Scale keeps
/// the map mildly contractive so most mapped points stay in-domain.
pub fn generic_affine(rng: &mut ChaCha8Rng) -> Transform {
    use tomojoint::transform::affine_build;
    let r = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    Transform::Affine(
        affine_build(
            [
                r(rng, -1.5, 1.5),
                r(rng, -1.5, 1.5),
                r(rng, -1.5, 1.5),
            ],
            [r(rng, -9.0, 9.0), r(rng, -9.0, 9.0), r(rng, -9.0, 9.0)],
            [r(rng, 0.93, 0.99), r(rng, 0.93, 0.99), r(rng, 0.93, 0.99)],
            [r(rng, -0.04, 0.04), r(rng, -0.04, 0.04), r(rng, -0.04, 0.04)],
        )
        .unwrap(),
    )
}

/// Random lattice deformation over `grid` with every component populated;
/// amplitude in mm.
pub fn generic_bspline(
    grid: &GridSpec,
    interior: [usize; 3],
    rng: &mut ChaCha8Rng,
    amplitude: f64,
) -> Transform {
    use tomojoint::transform::BSplineTransform;
    let mut b = BSplineTransform::for_grid(grid, interior).unwrap();
    for c in b.coeffs_mut() {
        *c = rng.random_range(-amplitude..amplitude);
    }
    Transform::BSpline(b)
}
