//! File formats: a line-oriented `key = value` sidecar next to a flat
//! little-endian binary payload for volumes and projection stacks, and a
//! pure-text format for transforms.
//!
//! Floats in text files are printed with Rust's shortest-roundtrip
//! formatting, so text round trips are bit-exact. Binary payloads open
//! with a magic word whose byte order doubles as an endianness check.

use crate::error::{io_err, Error, Result};
use crate::geometry::{Axis, Beam, Geometry};
use crate::projector::ProjectionStack;
use crate::transform::{AffineTransform, BSplineTransform, Transform};
use crate::volume::{GridSpec, Volume};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// First four bytes of every binary payload, little-endian.
const MAGIC: u32 = 0x544a_5631;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn name(self) -> &'static str {
        match self {
            Scalar::F32 => "float32",
            Scalar::F64 => "float64",
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Scalar> {
        match s {
            "float32" => Some(Scalar::F32),
            "float64" => Some(Scalar::F64),
            _ => None,
        }
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Sidecar parser: one `key = value` per line, `#` comments, every key
/// unique and, on read-back, known.
struct Sidecar {
    path: PathBuf,
    values: HashMap<String, String>,
    /// Keys the loader asked for; anything else is an unknown field.
    seen: std::cell::RefCell<Vec<String>>,
}

impl Sidecar {
    fn read(path: &Path) -> Result<Sidecar> {
        let text =
            std::fs::read_to_string(path).map_err(|e| io_err(path.display().to_string(), e))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(corrupt(
                    path,
                    format!("line {}: expected `key = value`", lineno + 1),
                ));
            };
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(corrupt(path, format!("duplicate key `{key}`")));
            }
        }
        Ok(Sidecar {
            path: path.to_path_buf(),
            values,
            seen: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.seen.borrow_mut().push(key.to_string());
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(&self.path, format!("missing key `{key}`")))
    }

    fn floats<const N: usize>(&self, key: &str) -> Result<[f64; N]> {
        let v = self.float_list(key)?;
        v.try_into()
            .map_err(|_| corrupt(&self.path, format!("`{key}` must hold {N} numbers")))
    }

    fn float_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get(key)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| corrupt(&self.path, format!("`{key}`: bad number `{tok}`")))
            })
            .collect()
    }

    fn float(&self, key: &str) -> Result<f64> {
        let [v] = self.floats::<1>(key)?;
        Ok(v)
    }

    fn integers<const N: usize>(&self, key: &str) -> Result<[usize; N]> {
        let raw = self.get(key)?;
        let v: Vec<usize> = raw
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| corrupt(&self.path, format!("`{key}`: bad integer `{tok}`")))
            })
            .collect::<Result<_>>()?;
        v.try_into()
            .map_err(|_| corrupt(&self.path, format!("`{key}` must hold {N} integers")))
    }

    fn integer(&self, key: &str) -> Result<usize> {
        let [v] = self.integers::<1>(key)?;
        Ok(v)
    }

    /// Every stored key must have been consumed by now.
    fn finish(&self) -> Result<()> {
        let seen = self.seen.borrow();
        for key in self.values.keys() {
            if !seen.iter().any(|s| s == key) {
                return Err(corrupt(&self.path, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

fn fmt_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{v:?}"));
    }
    out
}

fn fmt_usizes(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| io_err(path.display().to_string(), e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| io_err(path.display().to_string(), e))
}

/// Sibling binary payload path: the sidecar's name with a `.raw` extension.
fn payload_path(sidecar: &Path) -> Result<PathBuf> {
    if sidecar.extension().map(|e| e == "raw").unwrap_or(false) {
        return Err(Error::InvalidParameter(
            "sidecar path must not use the .raw extension of its payload".into(),
        ));
    }
    Ok(sidecar.with_extension("raw"))
}

fn payload_name(sidecar: &Path) -> Result<String> {
    let p = payload_path(sidecar)?;
    Ok(p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default())
}

fn write_payload(path: &Path, data: &[f64], scalar: Scalar) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + data.len() * scalar.size());
    bytes.extend_from_slice(&MAGIC.to_le_bytes());
    match scalar {
        Scalar::F32 => {
            for v in data {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Scalar::F64 => {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path.display().to_string(), e))
}

fn read_payload(sidecar: &Sidecar, dir: &Path, count: usize) -> Result<Vec<f64>> {
    let name = sidecar.get("data")?.to_string();
    let scalar = {
        let raw = sidecar.get("scalar")?;
        Scalar::parse(raw)
            .ok_or_else(|| corrupt(&sidecar.path, format!("unsupported scalar `{raw}`")))?
    };
    if sidecar.get("byte_order")? != "little" {
        return Err(corrupt(&sidecar.path, "byte_order must be `little`"));
    }
    let path = dir.join(&name);
    let bytes = std::fs::read(&path).map_err(|e| io_err(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(corrupt(&path, "payload shorter than its magic word"));
    }
    let magic = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    if magic == MAGIC.swap_bytes() {
        return Err(corrupt(
            &path,
            "magic word is byte-swapped; payload written with the opposite byte order",
        ));
    }
    if magic != MAGIC {
        return Err(corrupt(&path, "bad magic word"));
    }
    let body = &bytes[4..];
    if body.len() != count * scalar.size() {
        return Err(corrupt(
            &path,
            format!(
                "payload holds {} bytes, metadata implies {}",
                body.len(),
                count * scalar.size()
            ),
        ));
    }
    let data = match scalar {
        Scalar::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Scalar::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(data)
}

/// Write `v` as sidecar + payload. The payload lands next to the sidecar
/// under the same name with a `.raw` extension.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume, scalar: Scalar) -> Result<()> {
    let path = path.as_ref();
    let grid = v.grid();
    let text = format!(
        "format = volume\n\
         dims = {}\n\
         spacing_mm = {}\n\
         origin_mm = {}\n\
         scalar = {}\n\
         byte_order = little\n\
         data = {}\n",
        fmt_usizes(&grid.dims),
        fmt_floats(&grid.spacing_mm),
        fmt_floats(&grid.origin_mm),
        scalar.name(),
        payload_name(path)?,
    );
    write_text(path, &text)?;
    write_payload(&payload_path(path)?, v.data(), scalar)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let sc = Sidecar::read(path)?;
    if sc.get("format")? != "volume" {
        return Err(corrupt(path, "format must be `volume`"));
    }
    let dims = sc.integers::<3>("dims")?;
    let spacing = sc.floats::<3>("spacing_mm")?;
    let origin = sc.floats::<3>("origin_mm")?;
    let grid = GridSpec {
        dims,
        spacing_mm: spacing,
        origin_mm: origin,
    };
    grid.validate()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let data = read_payload(&sc, dir, grid.num_voxels())?;
    sc.finish()?;
    Volume::new(grid, data)
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
    }
}

fn beam_name(b: Beam) -> &'static str {
    match b {
        Beam::Cone => "cone",
        Beam::Parallel => "parallel",
    }
}

/// Write a projection stack with its full geometry embedded in the sidecar.
pub fn save_stack(path: impl AsRef<Path>, s: &ProjectionStack, scalar: Scalar) -> Result<()> {
    let path = path.as_ref();
    let g = s.geometry();
    let text = format!(
        "format = stack\n\
         num_views = {}\n\
         span_deg = {}\n\
         source_to_origin_mm = {}\n\
         origin_to_detector_mm = {}\n\
         detector_px = {}\n\
         detector_spacing_mm = {}\n\
         axis = {}\n\
         beam = {}\n\
         supersampling = {}\n\
         scalar = {}\n\
         byte_order = little\n\
         data = {}\n",
        g.num_views,
        fmt_floats(&[g.span_deg.0, g.span_deg.1]),
        format_args!("{:?}", g.source_to_origin_mm),
        format_args!("{:?}", g.origin_to_detector_mm),
        fmt_usizes(&[g.detector_px.0, g.detector_px.1]),
        fmt_floats(&[g.detector_spacing_mm.0, g.detector_spacing_mm.1]),
        axis_name(g.axis),
        beam_name(g.beam),
        g.supersampling,
        scalar.name(),
        payload_name(path)?,
    );
    write_text(path, &text)?;
    write_payload(&payload_path(path)?, s.data(), scalar)
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<ProjectionStack> {
    let path = path.as_ref();
    let sc = Sidecar::read(path)?;
    if sc.get("format")? != "stack" {
        return Err(corrupt(path, "format must be `stack`"));
    }
    let num_views = sc.integer("num_views")?;
    let span = sc.floats::<2>("span_deg")?;
    let sod = sc.float("source_to_origin_mm")?;
    let odd = sc.float("origin_to_detector_mm")?;
    let det = sc.integers::<2>("detector_px")?;
    let det_sp = sc.floats::<2>("detector_spacing_mm")?;
    let axis = match sc.get("axis")? {
        "x" => Axis::X,
        "y" => Axis::Y,
        other => return Err(corrupt(path, format!("unknown axis `{other}`"))),
    };
    let beam = match sc.get("beam")? {
        "cone" => Beam::Cone,
        "parallel" => Beam::Parallel,
        other => return Err(corrupt(path, format!("unknown beam `{other}`"))),
    };
    let supersampling = sc.integer("supersampling")? as u32;
    let geometry = Geometry::new(
        num_views,
        (span[0], span[1]),
        sod,
        odd,
        (det[0], det[1]),
        (det_sp[0], det_sp[1]),
        axis,
        beam,
        supersampling,
    )?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let data = read_payload(&sc, dir, geometry.total_pixels())?;
    sc.finish()?;
    ProjectionStack::new(geometry, data)
}

/// Transforms are small; they serialize entirely as text.
pub fn save_transform(path: impl AsRef<Path>, t: &Transform) -> Result<()> {
    let path = path.as_ref();
    let text = match t {
        Transform::Affine(a) => format!(
            "format = transform\n\
             kind = affine\n\
             params = {}\n",
            fmt_floats(a.params()),
        ),
        Transform::BSpline(b) => format!(
            "format = transform\n\
             kind = bspline\n\
             interior_dims = {}\n\
             control_dims = {}\n\
             spacing_mm = {}\n\
             origin_mm = {}\n\
             coeffs = {}\n",
            fmt_usizes(&b.interior_dims()),
            fmt_usizes(&b.control_dims()),
            fmt_floats(&b.spacing_mm()),
            fmt_floats(&b.origin_mm()),
            fmt_floats(b.coeffs()),
        ),
    };
    write_text(path, &text)
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<Transform> {
    let path = path.as_ref();
    let sc = Sidecar::read(path)?;
    if sc.get("format")? != "transform" {
        return Err(corrupt(path, "format must be `transform`"));
    }
    let t = match sc.get("kind")? {
        "affine" => {
            let raw = sc.float_list("params")?;
            let params: [f64; 12] = raw
                .try_into()
                .map_err(|_| corrupt(path, "`params` must hold 12 numbers"))?;
            Transform::Affine(AffineTransform::from_params(params)?)
        }
        "bspline" => {
            let interior = sc.integers::<3>("interior_dims")?;
            let control = sc.integers::<3>("control_dims")?;
            let spacing = sc.floats::<3>("spacing_mm")?;
            let origin = sc.floats::<3>("origin_mm")?;
            let coeffs = sc.float_list("coeffs")?;
            let b = BSplineTransform::from_parts(interior, spacing, origin, coeffs)?;
            if b.control_dims() != control {
                return Err(corrupt(
                    path,
                    "control_dims disagrees with interior_dims + 2",
                ));
            }
            Transform::BSpline(b)
        }
        other => return Err(corrupt(path, format!("unknown transform kind `{other}`"))),
    };
    sc.finish()?;
    Ok(t)
}
