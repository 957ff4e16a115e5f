//! Cubic B-spline free-form deformation.
//!
//! An interior lattice of control points spans the volume (corner nodes on
//! the corner voxel centers) and is padded by one ring on every side so the
//! cubic support never runs off the stored array. Coefficients are
//! displacements in mm, stored x-fastest with (dx,dy,dz) contiguous per
//! node; the parameter vector is all stored coefficients, ring included.

use crate::error::{Error, Result};
use crate::volume::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineTransform {
    interior: [usize; 3],
    lattice: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    coeffs: Vec<f64>,
}

/// Cubic B-spline basis on [0,1]: weights of nodes c-1, c, c+1, c+2.
#[inline]
pub fn basis(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

/// Derivatives of `basis` with respect to u.
#[inline]
pub fn basis_deriv(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -v * v / 2.0,
        (9.0 * u * u - 12.0 * u) / 6.0,
        (-9.0 * u * u + 6.0 * u + 3.0) / 6.0,
        u * u / 2.0,
    ]
}

const DOMAIN_TOL: f64 = 1e-9;

impl BSplineTransform {
    /// Identity deformation whose interior lattice spans the voxel-center
    /// extent of `grid`. Interior node counts must be at least 2 per axis.
    pub fn for_grid(grid: &GridSpec, interior: [usize; 3]) -> Result<BSplineTransform> {
        grid.validate()?;
        if interior.iter().any(|&n| n < 2) {
            return Err(Error::InvalidParameter(
                "control lattice needs at least 2 interior nodes per axis".into(),
            ));
        }
        let mut spacing = [0.0f64; 3];
        let mut origin = [0.0f64; 3];
        for ax in 0..3 {
            let extent = (grid.dims[ax] - 1) as f64 * grid.spacing_mm[ax];
            spacing[ax] = if extent > 0.0 {
                extent / (interior[ax] - 1) as f64
            } else {
                grid.spacing_mm[ax]
            };
            origin[ax] = grid.origin_mm[ax] - spacing[ax];
        }
        let lattice = [interior[0] + 2, interior[1] + 2, interior[2] + 2];
        let coeffs = vec![0.0; 3 * lattice[0] * lattice[1] * lattice[2]];
        Ok(BSplineTransform {
            interior,
            lattice,
            spacing_mm: spacing,
            origin_mm: origin,
            coeffs,
        })
    }

    /// Rebuild from stored fields, e.g. when loading from disk.
    pub fn from_parts(
        interior: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        coeffs: Vec<f64>,
    ) -> Result<BSplineTransform> {
        if interior.iter().any(|&n| n < 2) {
            return Err(Error::InvalidParameter(
                "control lattice needs at least 2 interior nodes per axis".into(),
            ));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0))
            || origin_mm.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "lattice spacing and origin must be finite, spacing positive".into(),
            ));
        }
        let lattice = [interior[0] + 2, interior[1] + 2, interior[2] + 2];
        let want = 3 * lattice[0] * lattice[1] * lattice[2];
        if coeffs.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "lattice {lattice:?} needs {want} coefficients, got {}",
                coeffs.len()
            )));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter(
                "lattice coefficients must be finite".into(),
            ));
        }
        Ok(BSplineTransform {
            interior,
            lattice,
            spacing_mm,
            origin_mm,
            coeffs,
        })
    }

    /// Stored lattice dimensions, ring included.
    pub fn control_dims(&self) -> [usize; 3] {
        self.lattice
    }

    /// Position of stored node (0,0,0), one spacing outside the interior.
    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn interior_dims(&self) -> [usize; 3] {
        self.interior
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn num_params(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn is_identity(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Flat node index of stored lattice node g (x-fastest).
    #[inline]
    pub fn node_index(&self, g: [usize; 3]) -> usize {
        (g[2] * self.lattice[1] + g[1]) * self.lattice[0] + g[0]
    }

    /// Physical position of stored lattice node g.
    pub fn node_position(&self, g: [usize; 3]) -> [f64; 3] {
        [
            self.origin_mm[0] + g[0] as f64 * self.spacing_mm[0],
            self.origin_mm[1] + g[1] as f64 * self.spacing_mm[1],
            self.origin_mm[2] + g[2] as f64 * self.spacing_mm[2],
        ]
    }

    /// Stored indices of the interior nodes, x-fastest.
    pub fn interior_nodes(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.interior.iter().product());
        for k in 1..=self.interior[2] {
            for j in 1..=self.interior[1] {
                for i in 1..=self.interior[0] {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    /// True when every voxel center of `grid` lies in the spline domain.
    pub fn covers(&self, grid: &GridSpec) -> bool {
        for ax in 0..3 {
            let lo = grid.origin_mm[ax];
            let hi = lo + (grid.dims[ax] - 1) as f64 * grid.spacing_mm[ax];
            let dom_lo = self.origin_mm[ax] + self.spacing_mm[ax];
            let dom_hi = self.origin_mm[ax] + self.interior[ax] as f64 * self.spacing_mm[ax];
            let tol = DOMAIN_TOL * (1.0 + self.spacing_mm[ax].abs());
            if lo < dom_lo - tol || hi > dom_hi + tol {
                return false;
            }
        }
        true
    }

    /// Support cell and per-axis weights at physical point p, or None when
    /// p falls outside the lattice domain.
    #[inline]
    pub(crate) fn setup(&self, p: [f64; 3]) -> Option<([usize; 3], [[f64; 4]; 3])> {
        let mut cell = [0usize; 3];
        let mut w = [[0.0f64; 4]; 3];
        for ax in 0..3 {
            let s = (p[ax] - self.origin_mm[ax]) / self.spacing_mm[ax];
            let tol = DOMAIN_TOL * (1.0 + s.abs());
            if s < 1.0 - tol || s > self.interior[ax] as f64 + tol {
                return None;
            }
            let c = (s.floor() as usize).clamp(1, self.interior[ax] - 1);
            cell[ax] = c;
            w[ax] = basis((s - c as f64).clamp(0.0, 1.0));
        }
        Some((cell, w))
    }

    /// Displacement in mm at physical point p.
    pub fn displacement(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let (cell, w) = self
            .setup(p)
            .ok_or(Error::OutOfDomain(p[0], p[1], p[2]))?;
        Ok(self.displacement_at(cell, &w))
    }

    #[inline]
    pub(crate) fn displacement_at(&self, cell: [usize; 3], w: &[[f64; 4]; 3]) -> [f64; 3] {
        let mut d = [0.0f64; 3];
        for dk in 0..4 {
            let k = cell[2] - 1 + dk;
            for dj in 0..4 {
                let j = cell[1] - 1 + dj;
                let wjk = w[1][dj] * w[2][dk];
                let row = (k * self.lattice[1] + j) * self.lattice[0] + cell[0] - 1;
                for di in 0..4 {
                    let wt = w[0][di] * wjk;
                    let base = 3 * (row + di);
                    d[0] += wt * self.coeffs[base];
                    d[1] += wt * self.coeffs[base + 1];
                    d[2] += wt * self.coeffs[base + 2];
                }
            }
        }
        d
    }

    pub fn apply(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let d = self.displacement(p)?;
        Ok([p[0] + d[0], p[1] + d[1], p[2] + d[2]])
    }
}
