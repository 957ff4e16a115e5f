//! 12-parameter affine transform on physical coordinates.
//!
//! Parameter layout is the row-major 3x4 matrix [R | t]: indices 0..3 are
//! row 0 of the linear part, index 3 the x translation, and so on. Points
//! map as y = M x + t.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    params: [f64; 12],
}

pub const AFFINE_IDENTITY: [f64; 12] =
    [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl AffineTransform {
    pub fn identity() -> AffineTransform {
        AffineTransform { params: AFFINE_IDENTITY }
    }

    pub fn from_params(params: [f64; 12]) -> Result<AffineTransform> {
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "affine parameters must be finite".into(),
            ));
        }
        Ok(AffineTransform { params })
    }

    pub fn params(&self) -> &[f64; 12] {
        &self.params
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.params;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.params == AFFINE_IDENTITY
    }

    /// Inverse map: y = M x + t  =>  x = M^-1 (y - t).
    pub fn inverse(&self) -> Result<AffineTransform> {
        let m = &self.params;
        let a = [m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]];
        let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6]);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "affine linear part is singular (det = {det})"
            )));
        }
        let inv = [
            (a[4] * a[8] - a[5] * a[7]) / det,
            (a[2] * a[7] - a[1] * a[8]) / det,
            (a[1] * a[5] - a[2] * a[4]) / det,
            (a[5] * a[6] - a[3] * a[8]) / det,
            (a[0] * a[8] - a[2] * a[6]) / det,
            (a[2] * a[3] - a[0] * a[5]) / det,
            (a[3] * a[7] - a[4] * a[6]) / det,
            (a[1] * a[6] - a[0] * a[7]) / det,
            (a[0] * a[4] - a[1] * a[3]) / det,
        ];
        let t = [m[3], m[7], m[11]];
        let ti = [
            -(inv[0] * t[0] + inv[1] * t[1] + inv[2] * t[2]),
            -(inv[3] * t[0] + inv[4] * t[1] + inv[5] * t[2]),
            -(inv[6] * t[0] + inv[7] * t[1] + inv[8] * t[2]),
        ];
        Ok(AffineTransform {
            params: [
                inv[0], inv[1], inv[2], ti[0], inv[3], inv[4], inv[5], ti[1], inv[6], inv[7],
                inv[8], ti[2],
            ],
        })
    }

    /// self after other: (self . other)(x) = self(other(x)).
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.params;
        let b = &other.params;
        let mut out = [0.0f64; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[4 * r + c] =
                    a[4 * r] * b[c] + a[4 * r + 1] * b[4 + c] + a[4 * r + 2] * b[8 + c];
            }
            out[4 * r + 3] = a[4 * r] * b[3]
                + a[4 * r + 1] * b[7]
                + a[4 * r + 2] * b[11]
                + a[4 * r + 3];
        }
        AffineTransform { params: out }
    }
}

fn rot3(axis: usize, deg: f64) -> [f64; 9] {
    let (s, c) = deg.to_radians().sin_cos();
    match axis {
        0 => [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c],
        1 => [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c],
        _ => [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
    }
}

fn mat_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0f64; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] =
                a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
    out
}

/// Assemble an affine transform from elementary factors.
///
/// The linear part is Rz * Ry * Rx * S * H with S = diag(scale) and H the
/// unit upper-triangular shear (entries xy, xz, yz); rotations are in
/// degrees, right-handed about each axis. Scale entries must be nonzero.
pub fn affine_build(
    translation_mm: [f64; 3],
    rotation_deg: [f64; 3],
    scale: [f64; 3],
    shear: [f64; 3],
) -> Result<AffineTransform> {
    for v in translation_mm
        .iter()
        .chain(&rotation_deg)
        .chain(&scale)
        .chain(&shear)
    {
        if !v.is_finite() {
            return Err(Error::InvalidParameter(
                "affine factors must be finite".into(),
            ));
        }
    }
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::InvalidParameter("scale entries must be nonzero".into()));
    }
    let r = mat_mul(
        &rot3(2, rotation_deg[2]),
        &mat_mul(&rot3(1, rotation_deg[1]), &rot3(0, rotation_deg[0])),
    );
    let sh = [
        scale[0],
        scale[0] * shear[0],
        scale[0] * shear[1],
        0.0,
        scale[1],
        scale[1] * shear[2],
        0.0,
        0.0,
        scale[2],
    ];
    let m = mat_mul(&r, &sh);
    Ok(AffineTransform {
        params: [
            m[0],
            m[1],
            m[2],
            translation_mm[0],
            m[3],
            m[4],
            m[5],
            translation_mm[1],
            m[6],
            m[7],
            m[8],
            translation_mm[2],
        ],
    })
}
