use crate::error::{Error, Result};

/// Placement of a voxel grid in physical space. `origin_mm` is the position
/// of the center of voxel (0,0,0); voxel (i,j,k) is centered at
/// `origin + (i*sx, j*sy, k*sz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridSpec {
    /// Grid centered on the lab origin, which is also the rotation center of
    /// the acquisition. Rotational motion therefore pivots about the volume
    /// center.
    pub fn centered(dims: [usize; 3], spacing_mm: [f64; 3]) -> GridSpec {
        let origin_mm = [
            -0.5 * (dims[0] - 1) as f64 * spacing_mm[0],
            -0.5 * (dims[1] - 1) as f64 * spacing_mm[1],
            -0.5 * (dims[2] - 1) as f64 * spacing_mm[2],
        ];
        GridSpec {
            dims,
            spacing_mm,
            origin_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "grid dims must be positive, got {:?}",
                self.dims
            )));
        }
        for s in self.spacing_mm {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidSpec(format!("bad voxel spacing {s}")));
            }
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidSpec("non-finite grid origin".into()));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + i as f64 * self.spacing_mm[0],
            self.origin_mm[1] + j as f64 * self.spacing_mm[1],
            self.origin_mm[2] + k as f64 * self.spacing_mm[2],
        ]
    }

    /// Outer bounding box (voxel centers plus a half-voxel skirt).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin_mm[a] - 0.5 * self.spacing_mm[a];
            hi[a] = self.origin_mm[a] + (self.dims[a] as f64 - 0.5) * self.spacing_mm[a];
        }
        (lo, hi)
    }
}

/// Dense scalar field on a regular grid, values stored x-fastest.
#[derive(Debug, Clone)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl Volume {
    /// Checked constructor: validates the grid, the length, and that every
    /// value is finite.
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Volume> {
        grid.validate()?;
        if data.len() != grid.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("volume contains non-finite values".into()));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Volume {
        Volume {
            data: vec![0.0; grid.num_voxels()],
            grid,
        }
    }

    /// Internal fast path, invariants guaranteed by the caller.
    pub(crate) fn from_parts(grid: GridSpec, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), grid.num_voxels());
        Volume { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.grid.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.grid.origin_mm
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.grid.dims[1] + j) * self.grid.dims[0] + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.grid.voxel_center(i, j, k)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.grid == other.grid
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
