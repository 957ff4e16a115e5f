use crate::error::{Error, Result};
use crate::volume::GridSpec;
use serde::{Deserialize, Serialize};

/// Rotation axis of the source arc. The detector lies in a z plane, so only
/// the two in-plane axes make sense here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beam {
    /// Diverging rays from a point source to a stationary detector.
    Cone,
    /// Rays parallel to the view direction, cast through a virtual detector
    /// that rotates with the view. Mainly for small analytic test setups.
    Parallel,
}

/// Acquisition description: a short arc of views around one axis, with the
/// detector below the volume (negative z).
///
/// Lab frame: the rotation center is the origin; at angle 0 the source sits at
/// `(0, 0, source_to_origin_mm)` and the detector plane is
/// `z = -origin_to_detector_mm` with pixel axes u along x and v along y.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub num_views: usize,
    pub span_deg: (f64, f64),
    pub source_to_origin_mm: f64,
    pub origin_to_detector_mm: f64,
    pub detector_px: (usize, usize),
    pub detector_spacing_mm: (f64, f64),
    pub axis: Axis,
    pub beam: Beam,
    /// Sub-rays per pixel edge; s*s rays per pixel, averaged.
    pub supersampling: u32,
}

/// One view's source position and detector frame, all in mm.
/// `axis_u_mm`/`axis_v_mm` are the steps between adjacent pixel centers, so
/// pixel (iu,iv) is centered at `detector_origin + iu*axis_u + iv*axis_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub index: usize,
    pub angle_deg: f64,
    pub source_mm: [f64; 3],
    pub detector_origin_mm: [f64; 3],
    pub axis_u_mm: [f64; 3],
    pub axis_v_mm: [f64; 3],
    /// Unit vector from the source toward the rotation center. For a
    /// parallel beam this is the common direction of every ray.
    pub ray_dir: [f64; 3],
}

fn rotate(axis: Axis, angle_rad: f64, p: [f64; 3]) -> [f64; 3] {
    let (s, c) = angle_rad.sin_cos();
    match axis {
        Axis::X => [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]],
        Axis::Y => [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]],
    }
}

impl Geometry {
    pub fn new(
        num_views: usize,
        span_deg: (f64, f64),
        source_to_origin_mm: f64,
        origin_to_detector_mm: f64,
        detector_px: (usize, usize),
        detector_spacing_mm: (f64, f64),
        axis: Axis,
        beam: Beam,
        supersampling: u32,
    ) -> Result<Geometry> {
        let geom = Geometry {
            num_views,
            span_deg,
            source_to_origin_mm,
            origin_to_detector_mm,
            detector_px,
            detector_spacing_mm,
            axis,
            beam,
            supersampling,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Paper-style default arc: n views spanning `span_deg`, source 600 mm
    /// above the rotation center, detector 60 mm below it, detector sized so
    /// the whole volume stays on it at every view angle (with slack for
    /// magnification and slant).
    pub fn default_for_grid(
        grid: &GridSpec,
        num_views: usize,
        span_deg: (f64, f64),
        beam: Beam,
        axis: Axis,
    ) -> Result<Geometry> {
        const SOD: f64 = 600.0;
        const ODD: f64 = 60.0;
        let half = [
            0.5 * grid.dims[0] as f64 * grid.spacing_mm[0],
            0.5 * grid.dims[1] as f64 * grid.spacing_mm[1],
            0.5 * grid.dims[2] as f64 * grid.spacing_mm[2],
        ];
        let rdiag = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
        let mag = (SOD + ODD) / (SOD - rdiag).max(1.0);
        // The axis that the arc sweeps across sees the slanted footprint,
        // and with a stationary detector the footprint center also slides
        // by ODD*tan(angle) as the source swings.
        let (half_u, half_v) = match axis {
            Axis::X => (half[0], half[1].hypot(half[2])),
            Axis::Y => (half[0].hypot(half[2]), half[1]),
        };
        let max_angle = span_deg.0.abs().max(span_deg.1.abs()).to_radians();
        let swing = match beam {
            Beam::Cone => ODD * max_angle.tan().abs(),
            Beam::Parallel => 0.0,
        };
        let (swing_u, swing_v) = match axis {
            Axis::X => (0.0, swing),
            Axis::Y => (swing, 0.0),
        };
        let du = grid.spacing_mm[0];
        let dv = grid.spacing_mm[1];
        let slack = 1.15;
        let nu = 2 * ((slack * (mag * half_u + swing_u) / du).ceil() as usize).max(1);
        let nv = 2 * ((slack * (mag * half_v + swing_v) / dv).ceil() as usize).max(1);
        Geometry::new(
            num_views,
            span_deg,
            SOD,
            ODD,
            (nu, nv),
            (du, dv),
            axis,
            beam,
            1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::InvalidGeometry {
                field: "num_views",
                message: "need at least one view".into(),
            });
        }
        if !(self.span_deg.0.is_finite() && self.span_deg.1.is_finite()) {
            return Err(Error::InvalidGeometry {
                field: "span_deg",
                message: "non-finite span".into(),
            });
        }
        if self.num_views > 1 && self.span_deg.0 >= self.span_deg.1 {
            return Err(Error::InvalidGeometry {
                field: "span_deg",
                message: format!(
                    "span must be increasing for multiple views, got {:?}",
                    self.span_deg
                ),
            });
        }
        if !(self.source_to_origin_mm.is_finite() && self.source_to_origin_mm > 0.0) {
            return Err(Error::InvalidGeometry {
                field: "source_to_origin_mm",
                message: format!("must be positive, got {}", self.source_to_origin_mm),
            });
        }
        if !(self.origin_to_detector_mm.is_finite() && self.origin_to_detector_mm >= 0.0) {
            return Err(Error::InvalidGeometry {
                field: "origin_to_detector_mm",
                message: format!("must be nonnegative, got {}", self.origin_to_detector_mm),
            });
        }
        if self.detector_px.0 == 0 || self.detector_px.1 == 0 {
            return Err(Error::InvalidGeometry {
                field: "detector_px",
                message: "zero-sized detector".into(),
            });
        }
        let (du, dv) = self.detector_spacing_mm;
        if !(du.is_finite() && du > 0.0 && dv.is_finite() && dv > 0.0) {
            return Err(Error::InvalidGeometry {
                field: "detector_spacing_mm",
                message: format!("must be positive, got ({du}, {dv})"),
            });
        }
        if self.supersampling == 0 {
            return Err(Error::InvalidGeometry {
                field: "supersampling",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// View angles in degrees, evenly spaced over the span, endpoints
    /// included. A single view sits at the span midpoint.
    pub fn angle_deg(&self, index: usize) -> f64 {
        let (lo, hi) = self.span_deg;
        if self.num_views == 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * index as f64 / (self.num_views - 1) as f64
    }

    pub fn view(&self, index: usize) -> Result<View> {
        if index >= self.num_views {
            return Err(Error::IndexOutOfRange {
                index,
                limit: self.num_views,
            });
        }
        let angle_deg = self.angle_deg(index);
        let rad = angle_deg.to_radians();
        let source_mm = rotate(self.axis, rad, [0.0, 0.0, self.source_to_origin_mm]);
        let (nu, nv) = self.detector_px;
        let (du, dv) = self.detector_spacing_mm;
        let det0 = [
            -0.5 * (nu - 1) as f64 * du,
            -0.5 * (nv - 1) as f64 * dv,
            -self.origin_to_detector_mm,
        ];
        let ax_u = [du, 0.0, 0.0];
        let ax_v = [0.0, dv, 0.0];
        let (detector_origin_mm, axis_u_mm, axis_v_mm) = match self.beam {
            // The physical detector does not move; only the source does.
            Beam::Cone => (det0, ax_u, ax_v),
            // Virtual detector rotating with the view, so the full arc stays
            // usable even at steep angles.
            Beam::Parallel => (
                rotate(self.axis, rad, det0),
                rotate(self.axis, rad, ax_u),
                rotate(self.axis, rad, ax_v),
            ),
        };
        let n = (source_mm[0] * source_mm[0]
            + source_mm[1] * source_mm[1]
            + source_mm[2] * source_mm[2])
            .sqrt();
        let ray_dir = [-source_mm[0] / n, -source_mm[1] / n, -source_mm[2] / n];
        Ok(View {
            index,
            angle_deg,
            source_mm,
            detector_origin_mm,
            axis_u_mm,
            axis_v_mm,
            ray_dir,
        })
    }

    pub fn views(&self) -> Vec<View> {
        (0..self.num_views)
            .map(|i| self.view(i).expect("index in range"))
            .collect()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector_px.0 * self.detector_px.1
    }

    pub fn total_pixels(&self) -> usize {
        self.pixels_per_view() * self.num_views
    }
}
