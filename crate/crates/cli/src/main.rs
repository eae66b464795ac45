//! `implicit-fit`: generate synthetic clouds, build compensation plans, fit,
//! search the noise bound and evaluate fits from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use implicit_fit::cloud::{read_points, write_points};
use implicit_fit::eval::{default_bbox, default_resolution, evaluate, fit_level_set, EvalReport};
use implicit_fit::fitter::{FitOutcome, GridSearchResult};
use implicit_fit::shapes::{add_noise, resolve_shape, sample_zero_set};
use implicit_fit::{
    build_plan, load_plan, save_plan, BasisSpec, Bbox, CompensationPlan, FitConfig, FitError, FitMode, FitResult,
    GridSpec, NoiseConfig, PointCloud, Result,
};

#[derive(Parser)]
#[command(name = "implicit-fit", version, about = "Noise-compensated implicit surface fitting")]
struct Cli {
    /// Worker threads for parallel reductions (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a shape's zero set and write clean and noisy clouds.
    Generate(GenerateArgs),
    /// Build the symbolic compensation plan for a basis.
    BuildPlan(BuildPlanArgs),
    /// Fit a surface to a point cloud.
    Fit(FitArgs),
    /// Search the noise bound minimizing the smallest singular value.
    GridSearch(FitArgs),
    /// Score a fit against noiseless points and ground-truth coefficients.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in shape name or shape JSON file.
    #[arg(long)]
    shape: String,
    /// Number of points.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Noise bound as a fraction of the largest absolute coordinate.
    #[arg(long, default_value_t = 0.0)]
    noise_level: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Half-width of the sampling cube.
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    /// Output directory for clean.csv, noisy.csv and metadata.json.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildPlanArgs {
    /// Basis as `monomial:n:gamma` or `poly-trig:n:gamma:omega`.
    #[arg(long)]
    basis: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Smoothed,
}

#[derive(Args)]
struct FitArgs {
    /// Point cloud (CSV, or XYZ for .xyz/.txt).
    #[arg(long)]
    input: PathBuf,
    /// Fit configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Basis as `monomial:n:gamma` or `poly-trig:n:gamma:omega`.
    #[arg(long)]
    basis: Option<String>,
    /// Prebuilt compensation plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Known noise bound in data units.
    #[arg(long, conflicts_with_all = ["noise_level", "grid"])]
    theta: Option<f64>,
    /// Known noise bound as a fraction of the largest absolute coordinate.
    #[arg(long, conflicts_with = "grid")]
    noise_level: Option<f64>,
    /// Candidate levels `lo:hi:step` as fractions of the reference scale.
    #[arg(long)]
    grid: Option<String>,
    /// Scale the grid levels multiply (default: largest absolute coordinate).
    #[arg(long)]
    reference_scale: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Ribbon offset for smoothed fits.
    #[arg(long)]
    smoothing_c: Option<f64>,
    /// Fit the raw data without centering and rescaling.
    #[arg(long)]
    no_normalize: bool,
    /// Skip noise compensation.
    #[arg(long)]
    naive: bool,
    /// Recorded in the report for reproducibility.
    #[arg(long)]
    seed: Option<u64>,
    /// Result JSON (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sigma curve CSV (grid searches).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Fitted level set (OBJ for 3D, CSV polylines for 2D).
    #[arg(long)]
    level_set: Option<PathBuf>,
    /// Grid nodes per axis for the level set.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Noiseless points the loss is measured against.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fit report written by `fit` or `grid-search`.
    #[arg(long)]
    fit: PathBuf,
    /// Ground truth: built-in shape name or shape JSON file.
    #[arg(long)]
    a_star: Option<String>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Report JSON (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Fitted level set export.
    #[arg(long)]
    level_set: Option<PathBuf>,
}

/// Everything needed to reproduce a fit.
#[derive(Serialize, Deserialize)]
struct FitReport {
    input: PathBuf,
    config: FitConfig,
    result: FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_search: Option<GridSearchResult>,
}

#[derive(Serialize)]
struct GenerateMetadata<'a> {
    shape: &'a str,
    count: usize,
    noise_level: f64,
    u_actual: f64,
    max_abs: f64,
    seed: u64,
    half_width: f64,
}

fn parse_basis(text: &str) -> Result<BasisSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || FitError::InvalidBasis(format!("expected monomial:n:gamma or poly-trig:n:gamma:omega, got `{text}`"));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["monomial", n, g] => BasisSpec::monomial(int(n)?, int(g)?),
        ["poly-trig", n, g, w] => BasisSpec::poly_trig(int(n)?, int(g)?, w.parse().map_err(|_| bad())?),
        _ => Err(bad()),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(FitError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display()))))
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let shape = resolve_shape(&args.shape)?;
    let seed = args.seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    });
    let bbox = Bbox::cube(shape.dim(), args.half_width);
    let clean = sample_zero_set(&shape, args.count, seed, &bbox)?;
    let noisy = add_noise(&clean, args.noise_level, seed)?;
    fs::create_dir_all(&args.output)?;
    write_points(args.output.join("clean.csv"), &clean.points)?;
    write_points(args.output.join("noisy.csv"), &noisy.points)?;
    let meta = GenerateMetadata {
        shape: &shape.name,
        count: args.count,
        noise_level: args.noise_level,
        u_actual: noisy.u_actual,
        max_abs: clean.points.max_abs(),
        seed,
        half_width: args.half_width,
    };
    write_json(Some(&args.output.join("metadata.json")), &meta)
}

fn build_plan_cmd(args: BuildPlanArgs) -> Result<()> {
    let plan = build_plan(&parse_basis(&args.basis)?)?;
    fs::write(&args.output, save_plan(&plan)?)?;
    eprintln!("plan: {} features, {} stored entries", plan.len(), plan.entry_forms.len());
    Ok(())
}

/// Merges the config file with flags; flags win.
fn resolve_config(args: &FitArgs, cloud: &PointCloud, grid_search: bool) -> Result<FitConfig> {
    let file: Option<FitConfig> = match &args.config {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    let basis = match (&args.basis, &file) {
        (Some(b), _) => parse_basis(b)?,
        (None, Some(f)) => f.basis.clone(),
        (None, None) => return Err(FitError::InvalidArgument("a basis is required (--basis or --config)".into())),
    };
    let mut config = match file {
        Some(f) => FitConfig { basis, ..f },
        None => FitConfig::new(basis, NoiseConfig::search(GridSpec::default())),
    };
    let flag_noise = args.theta.is_some() || args.noise_level.is_some() || args.grid.is_some();
    if let Some(theta) = args.theta {
        config.noise = NoiseConfig { theta: Some(theta), grid: None, ..config.noise };
    }
    if let Some(level) = args.noise_level {
        let reference = args.reference_scale.or(config.noise.reference_scale).unwrap_or_else(|| cloud.max_abs());
        config.noise = NoiseConfig { theta: Some(level * reference), grid: None, ..config.noise };
    }
    if let Some(grid) = &args.grid {
        config.noise = NoiseConfig { theta: None, grid: Some(GridSpec::parse(grid)?), ..config.noise };
    }
    if grid_search && config.noise.grid.is_none() {
        if flag_noise {
            return Err(FitError::InvalidArgument("grid-search takes --grid, not a known noise bound".into()));
        }
        config.noise = NoiseConfig { theta: None, grid: Some(GridSpec::default()), ..config.noise };
    }
    if let Some(r) = args.reference_scale {
        config.noise.reference_scale = Some(r);
    }
    if let Some(mode) = args.mode {
        config.mode = match mode {
            ModeArg::Plain => FitMode::Plain,
            ModeArg::Smoothed => FitMode::Smoothed,
        };
    }
    if let Some(c) = args.smoothing_c {
        config.smoothing_c = c;
    }
    if args.no_normalize {
        config.normalize = false;
    }
    if args.naive {
        config.compensate = false;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    config.validate()?;
    Ok(config)
}

fn export_level_set(path: &Path, fit: &FitResult, cloud: &PointCloud, resolution: Option<usize>) -> Result<()> {
    let bbox = default_bbox(cloud)?;
    let resolution = resolution.unwrap_or_else(|| default_resolution(cloud.dim()));
    let level_set = fit_level_set(fit, &bbox, resolution)?;
    for w in &level_set.warnings {
        eprintln!("warning: {w}");
    }
    fs::write(path, level_set.export())?;
    Ok(())
}

fn fit_cmd(args: FitArgs, threads: Option<usize>, grid_search: bool) -> Result<()> {
    require_file(&args.input)?;
    if let Some(p) = &args.config {
        require_file(p)?;
    }
    if let Some(p) = &args.plan {
        require_file(p)?;
    }
    let cloud = read_points(&args.input)?;
    let mut config = resolve_config(&args, &cloud, grid_search)?;
    if threads.is_some() {
        config.threads = threads;
    }
    let plan: Option<Arc<CompensationPlan>> = match &args.plan {
        Some(p) => Some(Arc::new(load_plan(&fs::read(p)?)?)),
        None => None,
    };
    let FitOutcome { result, grid_search: search } = implicit_fit::fit(&cloud, &config, plan)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(path), Some(gs)) = (&args.curve, &search) {
        fs::write(path, gs.curve_csv())?;
    }
    if let Some(path) = &args.level_set {
        export_level_set(path, &result, &cloud, args.resolution)?;
    }
    let report = FitReport { input: args.input.clone(), config, result, grid_search: search };
    write_json(args.output.as_deref(), &report)
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    require_file(&args.fit)?;
    if let Some(p) = &args.input {
        require_file(p)?;
    }
    let report: FitReport = serde_json::from_str(&fs::read_to_string(&args.fit)?)?;
    let original = args.input.as_ref().map(read_points).transpose()?;
    let a_star = match &args.a_star {
        Some(name) => {
            let shape = resolve_shape(name)?;
            if shape.basis_spec != report.result.basis_spec {
                return Err(FitError::InvalidArgument(format!(
                    "ground truth `{}` uses a different basis than the fit",
                    shape.name
                )));
            }
            Some(shape.coefficients)
        }
        None => None,
    };
    let dim = report.result.basis_spec.n;
    let resolution = args.resolution.unwrap_or_else(|| default_resolution(dim));
    let eval: EvalReport = evaluate(&report.result, original.as_ref(), a_star.as_deref(), None, resolution)?;
    for w in &eval.warnings {
        eprintln!("warning: {w}");
    }
    if let (Some(path), Some(cloud)) = (&args.level_set, &original) {
        export_level_set(path, &report.result, cloud, Some(resolution))?;
    }
    write_json(args.output.as_deref(), &eval)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(FitError::InvalidArgument("--threads must be at least 1".into()));
    }
    let go = move || match cli.command {
        Command::Generate(a) => generate(a),
        Command::BuildPlan(a) => build_plan_cmd(a),
        Command::Fit(a) => fit_cmd(a, threads, false),
        Command::GridSearch(a) => fit_cmd(a, threads, true),
        Command::Eval(a) => eval_cmd(a),
    };
    implicit_fit::fitter::with_threads(threads, go)?
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basis_strings() {
        assert_eq!(parse_basis("monomial:3:2").unwrap(), BasisSpec::monomial(3, 2).unwrap());
        assert_eq!(parse_basis("poly-trig:1:2:0.5").unwrap(), BasisSpec::poly_trig(1, 2, 0.5).unwrap());
        for bad in ["monomial:3", "cubic:3:2", "monomial:x:2", "poly-trig:1:2"] {
            assert!(parse_basis(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
