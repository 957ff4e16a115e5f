//! Experiment configuration: one TOML document describing the object, the
//! acquisition, the ground-truth motion, the method, and where results go.
//! Unknown keys are rejected at every level and the document is validated
//! in full before any compute starts.
//!
//! Section kinds are spelled as sub-tables, e.g. `[phantom.toroid]`,
//! `[truth.random_affine]`, `[method.simultaneous]`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Axis, Beam, Geometry};
use crate::phantom::{
    make_shepp_logan, make_toroid, random_affine_batch, random_bspline, AffineRanges,
    BSplineRanges, NoiseSpec, RandomKind, RandomTransformSpec, SheppLoganSpec, ToroidSpec,
};
use crate::pipeline::{IterativeOptions, SequentialOptions, SimultaneousOptions};
use crate::transform::{affine_build, Transform};
use crate::volume::{GridSpec, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub truth: TruthConfig,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub method: MethodConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub num_views: usize,
    pub span_deg: [f64; 2],
    pub beam: Beam,
    pub axis: Axis,
    /// Absent: detector size, pixel pitch, and distances are derived from
    /// the reconstruction grid.
    pub detector: Option<DetectorConfig>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            num_views: 11,
            span_deg: [-25.0, 25.0],
            beam: Beam::Cone,
            axis: Axis::X,
            detector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub source_to_origin_mm: f64,
    pub origin_to_detector_mm: f64,
    pub px: [usize; 2],
    pub spacing_mm: [f64; 2],
    #[serde(default = "one")]
    pub supersampling: u32,
}

fn one() -> u32 {
    1
}

impl GeometryConfig {
    pub fn build(&self, grid: &GridSpec) -> Result<Geometry> {
        let span = (self.span_deg[0], self.span_deg[1]);
        match &self.detector {
            None => Geometry::default_for_grid(grid, self.num_views, span, self.beam, self.axis),
            Some(d) => Geometry::new(
                self.num_views,
                span,
                d.source_to_origin_mm,
                d.origin_to_detector_mm,
                (d.px[0], d.px[1]),
                (d.spacing_mm[0], d.spacing_mm[1]),
                self.axis,
                self.beam,
                d.supersampling,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomConfig {
    Toroid(ToroidSpec),
    SheppLogan(SheppLoganSpec),
    /// User-supplied reference volume; the moving state is derived from it
    /// via the ground-truth transform, as with the synthetic objects.
    Volume { path: PathBuf },
}

impl PhantomConfig {
    /// Cheap structural checks; file-backed volumes are only opened in
    /// `build`.
    pub fn validate(&self) -> Result<()> {
        match self {
            PhantomConfig::Toroid(s) => s.validate(),
            PhantomConfig::SheppLogan(s) => s.validate(),
            PhantomConfig::Volume { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::ConfigInvalid("phantom volume path is empty".into()));
                }
                Ok(())
            }
        }
    }

    /// Paths resolve relative to `base`, the config file's directory.
    pub fn build(&self, base: &Path) -> Result<Volume> {
        match self {
            PhantomConfig::Toroid(s) => make_toroid(s),
            PhantomConfig::SheppLogan(s) => make_shepp_logan(s),
            PhantomConfig::Volume { path } => crate::io::load_volume(base.join(path)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthConfig {
    Affine(AffineParts),
    RandomAffine(RandomAffineConfig),
    RandomBspline(RandomBSplineConfig),
    File { path: PathBuf },
}

/// Explicit affine motion assembled from interpretable parts, applied as
/// translate(rotate(scale(shear(x)))).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineParts {
    pub translation_mm: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
}

impl Default for AffineParts {
    fn default() -> Self {
        AffineParts {
            translation_mm: [0.0; 3],
            rotation_deg: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }
}

/// One member of a seeded random affine batch; `index` picks which, so a
/// single batch seed can be replayed case by case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomAffineConfig {
    pub seed: u64,
    pub index: usize,
    pub translation_mm: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub shear: [f64; 2],
}

impl Default for RandomAffineConfig {
    fn default() -> Self {
        let r = AffineRanges::default();
        RandomAffineConfig {
            seed: 0,
            index: 0,
            translation_mm: r.translation_mm,
            rotation_deg: r.rotation_deg,
            scale: r.scale,
            shear: r.shear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomBSplineConfig {
    pub seed: u64,
    pub interior_dims: [usize; 3],
    pub offset_range_voxels: [[f64; 2]; 3],
}

impl Default for RandomBSplineConfig {
    fn default() -> Self {
        let r = BSplineRanges::default();
        RandomBSplineConfig {
            seed: 0,
            interior_dims: r.interior_dims,
            offset_range_voxels: r.offset_range_voxels,
        }
    }
}

impl TruthConfig {
    pub fn build(&self, grid: &GridSpec, base: &Path) -> Result<Transform> {
        match self {
            TruthConfig::Affine(p) => Ok(Transform::Affine(affine_build(
                p.translation_mm,
                p.rotation_deg,
                p.scale,
                p.shear,
            )?)),
            TruthConfig::RandomAffine(c) => {
                let spec = RandomTransformSpec {
                    seed: c.seed,
                    kind: RandomKind::Affine(AffineRanges {
                        translation_mm: c.translation_mm,
                        rotation_deg: c.rotation_deg,
                        scale: c.scale,
                        shear: c.shear,
                    }),
                };
                let batch = random_affine_batch(&spec, c.index + 1)?;
                Ok(Transform::Affine(batch.into_iter().last().unwrap()))
            }
            TruthConfig::RandomBspline(c) => {
                let spec = RandomTransformSpec {
                    seed: c.seed,
                    kind: RandomKind::BSpline(BSplineRanges {
                        interior_dims: c.interior_dims,
                        offset_range_voxels: c.offset_range_voxels,
                    }),
                };
                Ok(Transform::BSpline(random_bspline(&spec, grid)?))
            }
            TruthConfig::File { path } => crate::io::load_transform(base.join(path)),
        }
    }

    /// Seed recorded in the run manifest; explicit transforms have none.
    pub fn seed(&self) -> Option<u64> {
        match self {
            TruthConfig::RandomAffine(c) => Some(c.seed),
            TruthConfig::RandomBspline(c) => Some(c.seed),
            TruthConfig::Affine(_) | TruthConfig::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    Sequential(SequentialOptions),
    Iterative(IterativeOptions),
    Simultaneous(SimultaneousOptions),
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Sequential(_) => "sequential",
            MethodConfig::Iterative(_) => "iterative",
            MethodConfig::Simultaneous(_) => "simultaneous",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Sequential(o) => o.validate(),
            MethodConfig::Iterative(o) => o.validate(),
            MethodConfig::Simultaneous(o) => o.validate(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        Self::from_toml_str(&crate::io::read_text(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::ConfigInvalid("output_dir is empty".into()));
        }
        self.phantom.validate()?;
        if let Some(n) = &self.noise {
            if !(n.sigma.is_finite() && n.sigma >= 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "noise sigma {} must be finite and nonnegative",
                    n.sigma
                )));
            }
        }
        // Method options carry InvalidParameter errors; surface them as
        // config problems so the exit code says "fix the file".
        self.method
            .validate()
            .map_err(|e| Error::ConfigInvalid(e.to_string()))
    }
}

/// Hex SHA-256 of the config text exactly as read, recorded in manifests.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "runs/demo"

        [geometry]
        num_views = 11
        span_deg = [-25.0, 25.0]

        [phantom.toroid]
        volume_dims = [48, 48, 48]

        [truth.affine]
        translation_mm = [6.86, 0.0, -13.71]
        rotation_deg = [0.0, -30.0, 0.0]

        [method.sequential]
        recon_iters = 40
        register_iters = 30
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.geometry.num_views, 11);
        match &cfg.phantom {
            PhantomConfig::Toroid(s) => {
                assert_eq!(s.volume_dims, [48, 48, 48]);
                // Unset fields fall back to the spec defaults.
                assert_eq!(s.major_radius_mm, ToroidSpec::default().major_radius_mm);
            }
            other => panic!("wrong phantom {other:?}"),
        }
        match &cfg.method {
            MethodConfig::Sequential(o) => assert_eq!(o.recon_iters, 40),
            other => panic!("wrong method {other:?}"),
        }
        assert!(cfg.noise.is_none());
        assert_eq!(cfg.truth.seed(), None);
    }

    #[test]
    fn missing_section_names_it() {
        let text = MINIMAL.replace("[geometry]", "[geometry_zzz]");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::ConfigInvalid(msg)) => {
                assert!(msg.contains("geometry"), "{msg}")
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}\nextra_section = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::ConfigInvalid(_))
        ));
        let text = MINIMAL.replace("recon_iters = 40", "recon_iters = 40\nbogus = 2");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn invalid_method_budget_is_a_config_error() {
        let text = MINIMAL.replace("recon_iters = 40", "recon_iters = 0");
        match ExperimentConfig::from_toml_str(&text) {
            Err(e @ Error::ConfigInvalid(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn geometry_builds_from_grid_or_detector_block() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let grid = GridSpec::centered([48, 48, 48], [1.0, 1.0, 1.0]);
        let derived = cfg.geometry.build(&grid).unwrap();
        assert_eq!(derived.num_views, 11);

        let text = MINIMAL.replace(
            "span_deg = [-25.0, 25.0]",
            "span_deg = [-25.0, 25.0]\n\
             [geometry.detector]\n\
             source_to_origin_mm = 500.0\n\
             origin_to_detector_mm = 50.0\n\
             px = [96, 96]\n\
             spacing_mm = [1.5, 1.5]",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let explicit = cfg.geometry.build(&grid).unwrap();
        assert_eq!(explicit.detector_px, (96, 96));
        assert_eq!(explicit.source_to_origin_mm, 500.0);
        assert_eq!(explicit.supersampling, 1);
    }

    #[test]
    fn random_affine_index_replays_the_batch() {
        let text = MINIMAL.replace(
            "[truth.affine]\n        translation_mm = [6.86, 0.0, -13.71]\n        rotation_deg = [0.0, -30.0, 0.0]",
            "[truth.random_affine]\n        seed = 11\n        index = 3",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let grid = GridSpec::centered([8, 8, 8], [1.0, 1.0, 1.0]);
        let t = cfg.truth.build(&grid, Path::new(".")).unwrap();
        let spec = RandomTransformSpec {
            seed: 11,
            kind: RandomKind::Affine(AffineRanges::default()),
        };
        let batch = random_affine_batch(&spec, 4).unwrap();
        assert_eq!(t, Transform::Affine(batch[3].clone()));
        assert_eq!(cfg.truth.seed(), Some(11));
    }

    #[test]
    fn round_trip_through_toml_is_lossless() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let h1 = config_hash(MINIMAL);
        assert_eq!(h1, config_hash(MINIMAL));
        assert_eq!(h1.len(), 64);
        assert_ne!(h1, config_hash(&format!("{MINIMAL} ")));
    }
}
