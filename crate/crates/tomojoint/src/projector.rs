//! Ray-driven projector: exact voxel intersection lengths along each
//! source-to-pixel segment (Siddon-style incremental traversal).
//!
//! The back projector scatters with the same per-ray weight stream the
//! forward projector gathers with, so the pair is an exact transpose by
//! construction; no separate voxel-driven approximation is involved.

use crate::error::{Error, Result};
use crate::geometry::{Beam, Geometry, View};
use crate::par;
use crate::volume::{GridSpec, Volume};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Stack of projection images, one per view, pixels stored u-fastest.
#[derive(Debug, Clone)]
pub struct ProjectionStack {
    geometry: Geometry,
    data: Vec<f64>,
}

impl ProjectionStack {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<ProjectionStack> {
        geometry.validate()?;
        if data.len() != geometry.total_pixels() {
            return Err(Error::ShapeMismatch(format!(
                "stack length {} does not match geometry ({} views x {} px)",
                data.len(),
                geometry.num_views,
                geometry.pixels_per_view()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("stack contains non-finite values".into()));
        }
        Ok(ProjectionStack { geometry, data })
    }

    pub(crate) fn from_parts(geometry: Geometry, data: Vec<f64>) -> ProjectionStack {
        debug_assert_eq!(data.len(), geometry.total_pixels());
        ProjectionStack { geometry, data }
    }

    pub fn zeros(geometry: Geometry) -> ProjectionStack {
        let data = vec![0.0; geometry.total_pixels()];
        ProjectionStack { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel_index(&self, view: usize, iu: usize, iv: usize) -> usize {
        let (nu, nv) = self.geometry.detector_px;
        (view * nv + iv) * nu + iu
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Grid prepared for ray traversal: outer box faces plus index strides.
struct RayGrid {
    dims: [isize; 3],
    spacing: [f64; 3],
    box_min: [f64; 3],
    box_max: [f64; 3],
    stride: [usize; 3],
}

impl RayGrid {
    fn of(grid: &GridSpec) -> RayGrid {
        let (box_min, box_max) = grid.bounds();
        RayGrid {
            dims: [
                grid.dims[0] as isize,
                grid.dims[1] as isize,
                grid.dims[2] as isize,
            ],
            spacing: grid.spacing_mm,
            box_min,
            box_max,
            stride: [1, grid.dims[0], grid.dims[0] * grid.dims[1]],
        }
    }

    /// Visit every voxel crossed by the segment a->b with its intersection
    /// length in mm. Returns false when the segment misses the grid box.
    #[inline]
    fn traverse<F: FnMut(usize, f64)>(&self, a: [f64; 3], b: [f64; 3], visit: &mut F) -> bool {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let seg_len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if seg_len == 0.0 {
            return false;
        }
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for ax in 0..3 {
            if d[ax] == 0.0 {
                if a[ax] < self.box_min[ax] || a[ax] > self.box_max[ax] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[ax];
                let mut ta = (self.box_min[ax] - a[ax]) * inv;
                let mut tb = (self.box_max[ax] - a[ax]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 >= t1 {
            return false;
        }

        let mut v = [0isize; 3];
        let mut step = [0isize; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut dt = [f64::INFINITY; 3];
        for ax in 0..3 {
            let entry = a[ax] + t0 * d[ax];
            let mut vi = ((entry - self.box_min[ax]) / self.spacing[ax]).floor() as isize;
            vi = vi.clamp(0, self.dims[ax] - 1);
            v[ax] = vi;
            if d[ax] > 0.0 {
                step[ax] = 1;
                let plane = self.box_min[ax] + (vi + 1) as f64 * self.spacing[ax];
                t_next[ax] = (plane - a[ax]) / d[ax];
                dt[ax] = self.spacing[ax] / d[ax];
            } else if d[ax] < 0.0 {
                step[ax] = -1;
                let plane = self.box_min[ax] + vi as f64 * self.spacing[ax];
                t_next[ax] = (plane - a[ax]) / d[ax];
                dt[ax] = -self.spacing[ax] / d[ax];
            }
        }

        let mut t = t0;
        loop {
            let mut ax = 0;
            if t_next[1] < t_next[ax] {
                ax = 1;
            }
            if t_next[2] < t_next[ax] {
                ax = 2;
            }
            let tc = t_next[ax].min(t1);
            let w = (tc - t) * seg_len;
            if w > 0.0 {
                let idx = v[0] as usize * self.stride[0]
                    + v[1] as usize * self.stride[1]
                    + v[2] as usize * self.stride[2];
                visit(idx, w);
            }
            if t_next[ax] >= t1 {
                return true;
            }
            // Guard against a rounding-induced backward step.
            if t_next[ax] > t {
                t = t_next[ax];
            }
            v[ax] += step[ax];
            if v[ax] < 0 || v[ax] >= self.dims[ax] {
                return true;
            }
            t_next[ax] += dt[ax];
        }
    }
}

/// Endpoints of the sub-ray through detector pixel (iu,iv) at sub-pixel
/// offset (su,sv) of an s x s supersampling pattern.
#[inline]
fn ray_endpoints(
    view: &View,
    beam: Beam,
    reach: f64,
    iu: usize,
    iv: usize,
    su: u32,
    sv: u32,
    s: u32,
) -> ([f64; 3], [f64; 3]) {
    let ou = (su as f64 + 0.5) / s as f64 - 0.5;
    let ov = (sv as f64 + 0.5) / s as f64 - 0.5;
    let cu = iu as f64 + ou;
    let cv = iv as f64 + ov;
    let p = [
        view.detector_origin_mm[0] + cu * view.axis_u_mm[0] + cv * view.axis_v_mm[0],
        view.detector_origin_mm[1] + cu * view.axis_u_mm[1] + cv * view.axis_v_mm[1],
        view.detector_origin_mm[2] + cu * view.axis_u_mm[2] + cv * view.axis_v_mm[2],
    ];
    match beam {
        Beam::Cone => (view.source_mm, p),
        Beam::Parallel => (
            [
                p[0] - reach * view.ray_dir[0],
                p[1] - reach * view.ray_dir[1],
                p[2] - reach * view.ray_dir[2],
            ],
            p,
        ),
    }
}

fn parallel_reach(g: &Geometry, grid: &GridSpec) -> f64 {
    let (lo, hi) = grid.bounds();
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    g.source_to_origin_mm + g.origin_to_detector_mm + diag
}

/// Line integrals of `f` along every ray of the acquisition.
pub fn forward_project(f: &Volume, g: &Geometry) -> Result<ProjectionStack> {
    g.validate()?;
    let rg = RayGrid::of(f.grid());
    let views = g.views();
    let (nu, nv) = g.detector_px;
    let s = g.supersampling;
    let inv_ss = 1.0 / (s as f64 * s as f64);
    let reach = parallel_reach(g, f.grid());
    let fdata = f.data();
    let mut data = vec![0.0f64; g.total_pixels()];

    let row_job = |row_idx: usize, row: &mut [f64]| -> usize {
        let view = &views[row_idx / nv];
        let iv = row_idx % nv;
        let mut hits = 0usize;
        for (iu, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            let mut hit = false;
            for su in 0..s {
                for sv in 0..s {
                    let (a, b) = ray_endpoints(view, g.beam, reach, iu, iv, su, sv, s);
                    hit |= rg.traverse(a, b, &mut |idx, w| acc += w * fdata[idx]);
                }
            }
            *out = acc * inv_ss;
            hits += hit as usize;
        }
        hits
    };

    let hits: usize;
    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            hits = data
                .par_chunks_mut(nu)
                .enumerate()
                .map(|(i, row)| row_job(i, row))
                .sum();
        } else {
            hits = data
                .chunks_mut(nu)
                .enumerate()
                .map(|(i, row)| row_job(i, row))
                .sum();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        hits = data
            .chunks_mut(nu)
            .enumerate()
            .map(|(i, row)| row_job(i, row))
            .sum();
    }

    if hits == 0 {
        return Err(Error::GeometryVolumeMismatch);
    }
    Ok(ProjectionStack::from_parts(g.clone(), data))
}

/// Adjoint of `forward_project`: scatters each pixel value back along its
/// rays with the identical intersection weights.
///
/// Each view accumulates into its own partial volume; partials are summed in
/// view order, so the parallel and sequential paths produce identical bits.
pub fn back_project(p: &ProjectionStack, grid: &GridSpec) -> Result<Volume> {
    grid.validate()?;
    let rg = RayGrid::of(grid);
    let g = &p.geometry;
    let views = g.views();
    let (nu, nv) = g.detector_px;
    let s = g.supersampling;
    let inv_ss = 1.0 / (s as f64 * s as f64);
    let reach = parallel_reach(g, grid);
    let n_vox = grid.num_voxels();

    let view_job = |view: &View| -> (Vec<f64>, usize) {
        let mut acc = vec![0.0f64; n_vox];
        let mut hits = 0usize;
        let base = view.index * nv * nu;
        for iv in 0..nv {
            for iu in 0..nu {
                let val = p.data[base + iv * nu + iu] * inv_ss;
                let mut hit = false;
                for su in 0..s {
                    for sv in 0..s {
                        let (a, b) = ray_endpoints(view, g.beam, reach, iu, iv, su, sv, s);
                        hit |= rg.traverse(a, b, &mut |idx, w| acc[idx] += w * val);
                    }
                }
                hits += hit as usize;
            }
        }
        (acc, hits)
    };

    let partials: Vec<(Vec<f64>, usize)>;
    #[cfg(feature = "parallel")]
    {
        if par::parallel_enabled() {
            partials = views.par_iter().map(view_job).collect();
        } else {
            partials = views.iter().map(view_job).collect();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = views.iter().map(view_job).collect();
    }

    let mut out = vec![0.0f64; n_vox];
    let mut hits = 0usize;
    for (part, h) in &partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
        hits += h;
    }
    if hits == 0 {
        return Err(Error::GeometryVolumeMismatch);
    }
    Ok(Volume::from_parts(*grid, out))
}

/// Value and gradient of the data term 0.5*||Af - p||^2:
/// returns (value, A^T(Af - p)) on f's grid.
pub fn residual_gradient(f: &Volume, p: &ProjectionStack) -> Result<(f64, Volume)> {
    let mut r = forward_project(f, &p.geometry)?;
    for (rv, pv) in r.data.iter_mut().zip(&p.data) {
        *rv -= pv;
    }
    let value = 0.5 * r.norm_sq();
    let grad = back_project(&r, f.grid())?;
    Ok((value, grad))
}
