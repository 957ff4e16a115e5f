//! Command-line driver. Every subcommand is a thin shell over the library;
//! `run` executes a whole config file, the rest expose the individual
//! stages so pipelines can be composed from files on disk.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use tomojoint::config::ExperimentConfig;
use tomojoint::error::{Error, Result};
use tomojoint::experiment::{run_loaded, write_result_artifacts};
use tomojoint::geometry::{Axis, Beam, Geometry};
use tomojoint::io::{
    load_stack, load_transform, load_volume, save_stack, save_transform, save_volume, write_text,
    Scalar,
};
use tomojoint::metrics::{mse, param_abs_error, relative_error};
use tomojoint::optimize::{OptimizerOptions, Solver};
use tomojoint::phantom::{
    make_shepp_logan, make_toroid, simulate_pair, NoiseSpec, SheppLoganSpec, ToroidSpec,
};
use tomojoint::pipeline::{
    self, IterativeOptions, SequentialOptions, SimultaneousOptions,
};
use tomojoint::transform::{affine_build, Transform, TransformModel};
use tomojoint::volume::GridSpec;

#[derive(Parser)]
#[command(name = "tomojoint", version, about = "Joint tomosynthesis reconstruction and registration")]
struct Cli {
    /// Kernel threads: 1 forces the bit-reproducible sequential path,
    /// 0 keeps the default pool.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom volume.
    Phantom(PhantomArgs),
    /// Project a volume into two time-point stacks under a motion.
    Simulate(SimulateArgs),
    /// Least-squares reconstruction of one projection stack.
    Reconstruct(ReconstructArgs),
    /// SSD registration of a moving volume onto a fixed one.
    Register(RegisterArgs),
    /// One of the three joint schemes on two existing stacks.
    Joint(JointArgs),
    /// Volume (and optional transform) comparison metrics.
    Metrics(MetricsArgs),
    /// Full recipe from a config file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    Toroid,
    SheppLogan,
}

#[derive(Clone, Copy, ValueEnum)]
enum BeamArg {
    Cone,
    Parallel,
}

impl From<BeamArg> for Beam {
    fn from(b: BeamArg) -> Beam {
        match b {
            BeamArg::Cone => Beam::Cone,
            BeamArg::Parallel => Beam::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    X,
    Y,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Lbfgs,
    NonlinearCg,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Solver {
        match s {
            SolverArg::Lbfgs => Solver::Lbfgs,
            SolverArg::NonlinearCg => Solver::NonlinearCg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Affine,
    Bspline,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sequential,
    Iterative,
    Simultaneous,
}

fn triple<T: Copy>(v: &[T], what: &str) -> Result<[T; 3]> {
    v.try_into()
        .map_err(|_| Error::ConfigInvalid(format!("{what} needs exactly 3 values")))
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "toroid")]
    kind: PhantomKind,
    /// Grid size, comma separated (defaults to the phantom's own).
    #[arg(long, value_delimiter = ',')]
    volume_dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    spacing_mm: Option<Vec<f64>>,
    #[arg(long)]
    major_radius_mm: Option<f64>,
    #[arg(long)]
    minor_radius_mm: Option<f64>,
    #[arg(long)]
    inside_value: Option<f64>,
    #[arg(long)]
    intensity_scale: Option<f64>,
    /// Sidecar path; the binary payload lands next to it.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let volume = match a.kind {
        PhantomKind::Toroid => {
            let mut spec = ToroidSpec::default();
            if let Some(d) = &a.volume_dims {
                spec.volume_dims = triple(d, "volume_dims")?;
            }
            if let Some(s) = &a.spacing_mm {
                spec.spacing_mm = triple(s, "spacing_mm")?;
            }
            if let Some(v) = a.major_radius_mm {
                spec.major_radius_mm = v;
            }
            if let Some(v) = a.minor_radius_mm {
                spec.minor_radius_mm = v;
            }
            if let Some(v) = a.inside_value {
                spec.inside_value = v;
            }
            make_toroid(&spec)?
        }
        PhantomKind::SheppLogan => {
            let mut spec = SheppLoganSpec::default();
            if let Some(d) = &a.volume_dims {
                spec.volume_dims = triple(d, "volume_dims")?;
            }
            if let Some(s) = &a.spacing_mm {
                spec.spacing_mm = triple(s, "spacing_mm")?;
            }
            if let Some(v) = a.intensity_scale {
                spec.intensity_scale = v;
            }
            make_shepp_logan(&spec)?
        }
    };
    save_volume(&a.out, &volume, Scalar::F64)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, default_value_t = 11)]
    num_views: usize,
    /// Arc start and end in degrees.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "-25,25")]
    span_deg: Vec<f64>,
    #[arg(long, value_enum, default_value = "cone")]
    beam: BeamArg,
    #[arg(long, value_enum, default_value = "x")]
    axis: AxisArg,
}

impl GeometryArgs {
    fn build(&self, grid: &GridSpec) -> Result<Geometry> {
        if self.span_deg.len() != 2 {
            return Err(Error::ConfigInvalid("span_deg needs 2 values".into()));
        }
        Geometry::default_for_grid(
            grid,
            self.num_views,
            (self.span_deg[0], self.span_deg[1]),
            self.beam.into(),
            self.axis.into(),
        )
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Reference volume (time point 1).
    #[arg(long)]
    volume: PathBuf,
    /// Motion as a transform file; overrides the inline affine parts.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    translation_mm: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    rotation_deg: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    shear: Option<Vec<f64>>,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long)]
    out_fixed: PathBuf,
    #[arg(long)]
    out_moving: PathBuf,
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let volume = load_volume(&a.volume)?;
    let motion = match &a.transform {
        Some(p) => load_transform(p)?,
        None => {
            let part = |v: &Option<Vec<f64>>, what, fill| -> Result<[f64; 3]> {
                match v {
                    Some(v) => triple(v, what),
                    None => Ok([fill; 3]),
                }
            };
            Transform::Affine(affine_build(
                part(&a.translation_mm, "translation_mm", 0.0)?,
                part(&a.rotation_deg, "rotation_deg", 0.0)?,
                part(&a.scale, "scale", 1.0)?,
                part(&a.shear, "shear", 0.0)?,
            )?)
        }
    };
    let geometry = a.geometry.build(volume.grid())?;
    let noise = a.noise_sigma.map(|sigma| NoiseSpec {
        sigma,
        seed: a.noise_seed,
    });
    let (p1, p2) = simulate_pair(&volume, &motion, &geometry, noise.as_ref())?;
    save_stack(&a.out_fixed, &p1, Scalar::F64)?;
    save_stack(&a.out_moving, &p2, Scalar::F64)?;
    println!("wrote {}", a.out_fixed.display());
    println!("wrote {}", a.out_moving.display());
    Ok(())
}

#[derive(Args)]
struct GridArgs {
    /// Reconstruction grid size, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "1,1,1")]
    spacing_mm: Vec<f64>,
}

impl GridArgs {
    fn build(&self) -> Result<GridSpec> {
        Ok(GridSpec::centered(
            triple(&self.dims, "dims")?,
            triple(&self.spacing_mm, "spacing_mm")?,
        ))
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    projections: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 450)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "lbfgs")]
    solver: SolverArg,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let p = load_stack(&a.projections)?;
    let grid = a.grid.build()?;
    let opts = OptimizerOptions::default().with_max_iters(a.max_iters);
    let (volume, trace) = pipeline::reconstruct_ls(&p, &grid, a.solver.into(), &opts)?;
    save_volume(&a.out, &volume, Scalar::F64)?;
    println!("wrote {}", a.out.display());
    println!("iterations = {}", trace.iterations());
    println!("final_value = {:?}", trace.final_value());
    Ok(())
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "affine")]
    model: ModelArg,
    /// Control lattice interior, bspline model only.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "9,9,9")]
    interior_dims: Vec<usize>,
}

impl ModelArgs {
    fn build(&self) -> Result<TransformModel> {
        Ok(match self.model {
            ModelArg::Affine => TransformModel::Affine,
            ModelArg::Bspline => TransformModel::BSpline {
                interior_dims: triple(&self.interior_dims, "interior_dims")?,
            },
        })
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "lbfgs")]
    solver: SolverArg,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_register(a: RegisterArgs) -> Result<()> {
    let fixed = load_volume(&a.fixed)?;
    let moving = load_volume(&a.moving)?;
    let init = a.model.build()?.initial(fixed.grid())?;
    let opts = OptimizerOptions::default().with_max_iters(a.max_iters);
    let (t, trace) = pipeline::register_ssd(&fixed, &moving, &init, a.solver.into(), &opts)?;
    save_transform(&a.out, &t)?;
    println!("wrote {}", a.out.display());
    println!("iterations = {}", trace.iterations());
    println!("final_value = {:?}", trace.final_value());
    Ok(())
}

#[derive(Args)]
struct JointArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    fixed_projections: PathBuf,
    #[arg(long)]
    moving_projections: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "lbfgs")]
    solver: SolverArg,
    /// Sequential: reconstruction iterations per volume.
    #[arg(long)]
    recon_iters: Option<usize>,
    /// Sequential and iterative: registration iterations.
    #[arg(long)]
    register_iters: Option<usize>,
    /// Iterative: alternation sweeps.
    #[arg(long)]
    outer_sweeps: Option<usize>,
    /// Iterative: reconstruction iterations per volume per sweep.
    #[arg(long)]
    inner_recon_iters: Option<usize>,
    /// Simultaneous: total inner-iteration budget.
    #[arg(long)]
    total_budget: Option<usize>,
    /// Simultaneous: volume iterations per sweep.
    #[arg(long)]
    inner_f_iters: Option<usize>,
    /// Simultaneous: transform iterations per sweep.
    #[arg(long)]
    inner_zeta_iters: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_joint(a: JointArgs) -> Result<()> {
    let p1 = load_stack(&a.fixed_projections)?;
    let p2 = load_stack(&a.moving_projections)?;
    let grid = a.grid.build()?;
    let model = a.model.build()?;
    let solver = a.solver.into();
    let result = match a.method {
        MethodArg::Sequential => {
            let mut o = SequentialOptions {
                model,
                solver,
                ..SequentialOptions::default()
            };
            if let Some(v) = a.recon_iters {
                o.recon_iters = v;
            }
            if let Some(v) = a.register_iters {
                o.register_iters = v;
            }
            o.validate()?;
            pipeline::sequential(&p1, &p2, &grid, &o)?
        }
        MethodArg::Iterative => {
            let mut o = IterativeOptions {
                model,
                solver,
                ..IterativeOptions::default()
            };
            if let Some(v) = a.outer_sweeps {
                o.outer_sweeps = v;
            }
            if let Some(v) = a.inner_recon_iters {
                o.inner_recon_iters = v;
            }
            if let Some(v) = a.register_iters {
                o.register_iters = v;
            }
            o.validate()?;
            pipeline::iterative(&p1, &p2, &grid, &o)?
        }
        MethodArg::Simultaneous => {
            let mut o = SimultaneousOptions {
                model,
                solver,
                ..SimultaneousOptions::default()
            };
            if let Some(v) = a.total_budget {
                o.total_budget = v;
            }
            if let Some(v) = a.inner_f_iters {
                o.inner_f_iters = v;
            }
            if let Some(v) = a.inner_zeta_iters {
                o.inner_zeta_iters = v;
            }
            o.validate()?;
            pipeline::simultaneous(&p1, &p2, &grid, &o)?
        }
    };
    write_result_artifacts(&a.out_dir, &result)?;
    println!("wrote {}", a.out_dir.display());
    println!("objective_evals = {}", result.total_evals());
    Ok(())
}

#[derive(Args)]
struct MetricsArgs {
    /// Volume under evaluation.
    #[arg(long)]
    result: PathBuf,
    /// Ground-truth volume.
    #[arg(long)]
    truth: PathBuf,
    /// Recovered transform, compared entrywise when both are given.
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    truth_transform: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let result = load_volume(&a.result)?;
    let truth = load_volume(&a.truth)?;
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("mse,{:?}\n", mse(&result, &truth)?));
    csv.push_str(&format!(
        "relative_error,{:?}\n",
        relative_error(&result, &truth)?
    ));
    if let (Some(tp), Some(gp)) = (&a.transform, &a.truth_transform) {
        let t = load_transform(tp)?;
        let g = load_transform(gp)?;
        for (i, e) in param_abs_error(&t, &g)?.iter().enumerate() {
            csv.push_str(&format!("param_{},{:?}\n", i + 1, e));
        }
    }
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let text = tomojoint::io::read_text(&a.config)?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let summary = run_loaded(&cfg, &text, &base)?;
    println!("method = {}", cfg.method.name());
    println!("output_dir = {}", summary.output_dir.display());
    if let Some(m) = &summary.result.metrics {
        println!("initial_mse = {:?}", m.initial_mse);
        println!("mse = {:?}", m.mse);
        println!("relative_error = {:?}", m.relative_error);
    }
    for (stage, secs) in &summary.timings {
        println!("stage_{stage}_s = {secs:.3}");
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Register(a) => cmd_register(a),
        Cmd::Joint(a) => cmd_joint(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::Run(a) => cmd_run(a),
    }
}

fn main() {
    let cli = Cli::parse();
    tomojoint::par::set_threads(cli.threads);
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(i32::from(e.exit_code()));
    }
}
