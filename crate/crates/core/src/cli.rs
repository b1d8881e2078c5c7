//! Experiment driver behind the `glasso-tune` binary.
//!
//! A run generates a synthetic sparse precision matrix, samples from it,
//! splits the samples into train and test halves, and then runs the grid
//! baseline, the scalar hypergradient method, the weighted method, or the
//! grid and scalar methods side by side. Results land in `output_dir`.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::bilevel::{
    default_grid, grid_search, lambda_init_with, scalar_start, tune_matrix_observed, tune_scalar_observed,
    BilevelConfig, GridResult, LambdaInitPolicy, LambdaSummary, StopReason, TrajectoryWriter, TuneOutcome,
};
use crate::data_gen::{synthetic_problem, Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::glasso::{solve, Regularization, SolverConfig};
use crate::implicit_diff::relative_error;
use crate::io::write_matrix_file;
use crate::linalg::SymmetricMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Grid search only.
    Grid,
    /// Scalar hypergradient descent.
    Scalar,
    /// Scalar run, then weighted descent from its optimum.
    Matrix,
    /// Grid search and scalar descent, with the gap between their optima.
    Compare,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        <Mode as ValueEnum>::from_str(s, true)
    }
}

/// Everything a run depends on; echoed into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub p: usize,
    pub n: usize,
    pub density: f64,
    pub seed: u64,
    pub split_ratio: f64,
    pub rho: f64,
    pub max_outer_iter: usize,
    pub inner_tol: f64,
    pub grid_points: usize,
    pub output_dir: PathBuf,
    pub emit_matrices: bool,
    pub lambda_init_policy: LambdaInitPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Compare,
            p: 100,
            n: 2000,
            density: 0.1,
            seed: 0,
            split_ratio: 0.5,
            rho: 0.1,
            max_outer_iter: 200,
            inner_tol: 1e-8,
            grid_points: 100,
            output_dir: PathBuf::from("glasso-tune-out"),
            emit_matrices: false,
            lambda_init_policy: LambdaInitPolicy::OffdiagMax,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> std::result::Result<(), UsageError> {
        let bad = |flag: &str, message: String| {
            Err(UsageError::Invalid {
                flag: flag.to_string(),
                message,
            })
        };
        if self.p < 2 {
            return bad("--p", format!("must be at least 2, got {}", self.p));
        }
        if self.n < 2 {
            return bad("--n", format!("must be at least 2, got {}", self.n));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad("--density", format!("must lie in (0, 1], got {}", self.density));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("--split-ratio", format!("must lie in (0, 1), got {}", self.split_ratio));
        }
        let n_train = (self.n as f64 * self.split_ratio).floor() as usize;
        if n_train == 0 || n_train >= self.n {
            return bad(
                "--split-ratio",
                format!("{} leaves an empty side with n = {}", self.split_ratio, self.n),
            );
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("--rho", format!("must be positive, got {}", self.rho));
        }
        if self.max_outer_iter == 0 {
            return bad("--max-outer-iter", "must be at least 1".into());
        }
        if !(self.inner_tol > 0.0 && self.inner_tol.is_finite()) {
            return bad("--inner-tol", format!("must be positive, got {}", self.inner_tol));
        }
        if self.grid_points == 0 {
            return bad("--grid-points", "must be at least 1".into());
        }
        Ok(())
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig::default().with_tol(self.inner_tol)
    }
}

/// Command-line flags; every value is optional so that file values and
/// defaults can fill the gaps.
#[derive(Debug, Parser)]
#[command(
    name = "glasso-tune",
    version,
    about = "Tune Graphical Lasso regularization by hypergradient descent on a held-out criterion"
)]
pub struct Args {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Dimension of the precision matrix.
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of samples before the split.
    #[arg(long)]
    pub n: Option<usize>,
    /// Off-diagonal density of the Cholesky factor of the true precision.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of samples used for training.
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Outer step size on log λ.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub max_outer_iter: Option<usize>,
    /// Tolerance of the inner GLASSO solver.
    #[arg(long)]
    pub inner_tol: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Also write lambda_opt.csv, theta_true.csv and theta_hat.csv.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub emit_matrices: Option<bool>,
    /// Flat `key=value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// offdiag-max or paper-literal.
    #[arg(long)]
    pub lambda_init_policy: Option<LambdaInitPolicy>,
}

/// Why the arguments could not be turned into a config.
#[derive(Debug, Clone, PartialEq)]
pub enum UsageError {
    /// `--help` or `--version`; not a failure.
    Display(String),
    /// Rejected by the argument parser.
    Parser(String),
    Invalid {
        flag: String,
        message: String,
    },
}

impl UsageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            UsageError::Display(_) => 0,
            _ => 2,
        }
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UsageError::Display(s) | UsageError::Parser(s) => f.write_str(s.trim_end()),
            UsageError::Invalid { flag, message } => write!(f, "error: invalid value for {flag}: {message}"),
        }
    }
}

impl std::error::Error for UsageError {}

fn parse_value<T>(flag: &str, value: &str) -> std::result::Result<T, UsageError>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| UsageError::Invalid {
        flag: flag.to_string(),
        message: format!("{value:?}: {e}"),
    })
}

fn parse_bool(flag: &str, value: &str) -> std::result::Result<bool, UsageError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(UsageError::Invalid {
            flag: flag.to_string(),
            message: format!("{other:?} is not a boolean"),
        }),
    }
}

/// Applies one `key=value` line. Keys match flag names with dashes and
/// underscores ignored.
fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), UsageError> {
    let normalized: String = key
        .trim()
        .chars()
        .filter(|c| *c != '-' && *c != '_')
        .map(|c| c.to_ascii_lowercase())
        .collect();
    match normalized.as_str() {
        "mode" => cfg.mode = parse_value("--mode", value)?,
        "p" => cfg.p = parse_value("--p", value)?,
        "n" => cfg.n = parse_value("--n", value)?,
        "density" => cfg.density = parse_value("--density", value)?,
        "seed" => cfg.seed = parse_value("--seed", value)?,
        "splitratio" => cfg.split_ratio = parse_value("--split-ratio", value)?,
        "rho" => cfg.rho = parse_value("--rho", value)?,
        "maxouteriter" => cfg.max_outer_iter = parse_value("--max-outer-iter", value)?,
        "innertol" => cfg.inner_tol = parse_value("--inner-tol", value)?,
        "gridpoints" => cfg.grid_points = parse_value("--grid-points", value)?,
        "outputdir" => cfg.output_dir = PathBuf::from(value.trim()),
        "emitmatrices" => cfg.emit_matrices = parse_bool("--emit-matrices", value)?,
        "lambdainitpolicy" => cfg.lambda_init_policy = parse_value("--lambda-init-policy", value)?,
        _ => {
            return Err(UsageError::Invalid {
                flag: "--config".into(),
                message: format!("unknown key {key:?}"),
            })
        }
    }
    Ok(())
}

/// Applies the contents of a config file on top of `cfg`.
pub fn apply_config_text(cfg: &mut ExperimentConfig, text: &str) -> std::result::Result<(), UsageError> {
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(UsageError::Invalid {
                flag: "--config".into(),
                message: format!("line {}: expected key=value, got {line:?}", lineno + 1),
            });
        };
        apply_key(cfg, key, value)?;
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn parse_config<I, T>(args: I) -> std::result::Result<ExperimentConfig, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => UsageError::Display(e.render().to_string()),
            _ => UsageError::Parser(e.render().to_string()),
        }
    })?;
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| UsageError::Invalid {
            flag: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        apply_config_text(&mut cfg, &text)?;
    }
    let Args {
        mode,
        p,
        n,
        density,
        seed,
        split_ratio,
        rho,
        max_outer_iter,
        inner_tol,
        grid_points,
        output_dir,
        emit_matrices,
        config: _,
        lambda_init_policy,
    } = args;
    cfg.mode = mode.unwrap_or(cfg.mode);
    cfg.p = p.unwrap_or(cfg.p);
    cfg.n = n.unwrap_or(cfg.n);
    cfg.density = density.unwrap_or(cfg.density);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.split_ratio = split_ratio.unwrap_or(cfg.split_ratio);
    cfg.rho = rho.unwrap_or(cfg.rho);
    cfg.max_outer_iter = max_outer_iter.unwrap_or(cfg.max_outer_iter);
    cfg.inner_tol = inner_tol.unwrap_or(cfg.inner_tol);
    cfg.grid_points = grid_points.unwrap_or(cfg.grid_points);
    cfg.output_dir = output_dir.unwrap_or(cfg.output_dir);
    cfg.emit_matrices = emit_matrices.unwrap_or(cfg.emit_matrices);
    cfg.lambda_init_policy = lambda_init_policy.unwrap_or(cfg.lambda_init_policy);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub p: usize,
    pub n: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Nonzero entries above the diagonal of the true precision.
    pub true_edges: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub points: usize,
    pub failed_points: usize,
    pub best_lambda: f64,
    pub best_criterion: f64,
    pub best_rel_error: Option<f64>,
    /// Grid value with the smallest relative error to the truth.
    pub rel_error_argmin_lambda: Option<f64>,
    pub cell_width: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneSummary {
    pub lambda: LambdaSummary,
    pub criterion: f64,
    pub initial_criterion: f64,
    pub rel_error: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_hypergrad_norm: f64,
    pub stop: StopReason,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub lambda_grid: f64,
    pub lambda_gradient: f64,
    pub gap: f64,
    pub cell_width: f64,
    pub within_one_cell: bool,
    pub criterion_grid: f64,
    pub criterion_gradient: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub data: DataSummary,
    pub lambda_init: f64,
    pub lambda_start: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scalar: Option<TuneSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<TuneSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    pub seconds: f64,
}

fn tune_summary(out: &TuneOutcome, truth: &GroundTruth, seconds: f64) -> TuneSummary {
    let records = &out.trajectory.records;
    TuneSummary {
        lambda: LambdaSummary::of(&out.reg),
        criterion: out.criterion,
        initial_criterion: records.first().map_or(f64::NAN, |r| r.criterion),
        rel_error: relative_error(&out.estimate.theta, &truth.theta_true),
        outer_iterations: records.len(),
        inner_iterations: records.iter().map(|r| r.inner_iters).sum(),
        final_hypergrad_norm: records.last().map_or(f64::NAN, |r| r.hypergrad_norm),
        stop: out.stop,
        seconds,
    }
}

type Tuner = fn(
    &SymmetricMatrix,
    &SymmetricMatrix,
    &BilevelConfig,
    Option<&SymmetricMatrix>,
    &mut dyn FnMut(&crate::bilevel::OuterRecord),
) -> Result<TuneOutcome>;

/// Runs one outer loop while streaming its trajectory to `path`.
fn tune_to_file(
    tuner: Tuner,
    path: &Path,
    matrix: bool,
    data: &Dataset,
    truth: &GroundTruth,
    config: &BilevelConfig,
) -> Result<TuneOutcome> {
    let mut writer = TrajectoryWriter::new(BufWriter::new(File::create(path)?), matrix, true)?;
    let mut write_error = None;
    let outcome = tuner(
        &data.cov_train,
        &data.cov_test,
        config,
        Some(&truth.theta_true),
        &mut |r| {
            if let Err(e) = writer.write(r) {
                write_error.get_or_insert(e);
            }
        },
    )?;
    match write_error {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

/// Executes a validated config and writes every output file.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;

    let (truth, data) = synthetic_problem(cfg.p, cfg.n, cfg.density, cfg.split_ratio, cfg.seed)?;
    let lambda_init = lambda_init_with(&data.cov_train, cfg.lambda_init_policy)?;
    let lambda_start = scalar_start(&data.cov_train, cfg.lambda_init_policy)?;
    let solver = cfg.solver();
    let p = cfg.p;
    log::info!(
        "p = {p}, n = {} ({} train / {} test), lambda_init = {lambda_init:.6e}",
        cfg.n,
        data.train_indices.len(),
        data.test_indices.len()
    );

    let mut summary = RunSummary {
        config: cfg.clone(),
        data: DataSummary {
            p,
            n: cfg.n,
            n_train: data.train_indices.len(),
            n_test: data.test_indices.len(),
            true_edges: (0..p)
                .flat_map(|j| (0..j).map(move |i| (i, j)))
                .filter(|&(i, j)| truth.mask[[i, j]])
                .count(),
        },
        lambda_init,
        lambda_start,
        grid: None,
        scalar: None,
        matrix: None,
        comparison: None,
        seconds: 0.0,
    };

    let mut grid: Option<GridResult> = None;
    if matches!(cfg.mode, Mode::Grid | Mode::Compare) {
        let t = Instant::now();
        let lambdas = default_grid(lambda_init, cfg.grid_points);
        let g = grid_search(
            &data.cov_train,
            &data.cov_test,
            &lambdas,
            &solver,
            true,
            Some(&truth.theta_true),
        )?;
        g.write_csv(BufWriter::new(File::create(dir.join("grid_curve.csv"))?))?;
        let best_rel_error = g.points[g.best_index].rel_error;
        summary.grid = Some(GridSummary {
            points: g.points.len(),
            failed_points: g.points.iter().filter(|pt| pt.criterion.is_none()).count(),
            best_lambda: g.best_lambda,
            best_criterion: g.best_criterion,
            best_rel_error,
            rel_error_argmin_lambda: g.best_rel_error_index().map(|i| g.points[i].lambda),
            cell_width: g.cell_width_at_best(),
            seconds: t.elapsed().as_secs_f64(),
        });
        log::info!(
            "grid: best lambda {:.6e}, criterion {:.10}",
            g.best_lambda,
            g.best_criterion
        );
        grid = Some(g);
    }

    let mut final_reg = grid.as_ref().map(|g| Regularization::Scalar(g.best_lambda));
    let mut final_theta = None;

    if matches!(cfg.mode, Mode::Scalar | Mode::Matrix | Mode::Compare) {
        let mut bcfg = BilevelConfig::new(Regularization::Scalar(lambda_start));
        bcfg.step_size = cfg.rho;
        bcfg.max_outer_iter = cfg.max_outer_iter;
        bcfg.solver = solver.clone();
        let scalar_file = if cfg.mode == Mode::Matrix {
            "scalar_trajectory.csv"
        } else {
            "trajectory.csv"
        };
        let t = Instant::now();
        let scalar = tune_to_file(
            tune_scalar_observed,
            &dir.join(scalar_file),
            false,
            &data,
            &truth,
            &bcfg,
        )?;
        summary.scalar = Some(tune_summary(&scalar, &truth, t.elapsed().as_secs_f64()));
        log::info!(
            "scalar: lambda {:.6e}, criterion {:.10}, {:?} after {} iterations",
            scalar.lambda().unwrap_or(f64::NAN),
            scalar.criterion,
            scalar.stop,
            scalar.trajectory.len()
        );

        if let (Some(g), Some(lambda_gradient)) = (&grid, scalar.lambda()) {
            let gap = (g.best_lambda - lambda_gradient).abs();
            let cell_width = g.cell_width_at_best();
            summary.comparison = Some(Comparison {
                lambda_grid: g.best_lambda,
                lambda_gradient,
                gap,
                cell_width,
                within_one_cell: gap <= cell_width,
                criterion_grid: g.best_criterion,
                criterion_gradient: scalar.criterion,
            });
        }

        if cfg.mode == Mode::Matrix {
            bcfg.init = scalar.reg.clone();
            let t = Instant::now();
            let weighted = tune_to_file(
                tune_matrix_observed,
                &dir.join("trajectory.csv"),
                true,
                &data,
                &truth,
                &bcfg,
            )?;
            summary.matrix = Some(tune_summary(&weighted, &truth, t.elapsed().as_secs_f64()));
            log::info!(
                "matrix: criterion {:.10}, {:?} after {} iterations",
                weighted.criterion,
                weighted.stop,
                weighted.trajectory.len()
            );
            final_reg = Some(weighted.reg);
            final_theta = Some(weighted.estimate.theta);
        } else {
            final_reg = Some(scalar.reg);
            final_theta = Some(scalar.estimate.theta);
        }
    }

    if cfg.emit_matrices {
        let reg = final_reg.expect("every mode produces a regularization");
        let theta_hat = match final_theta {
            Some(t) => t,
            None => solve(&data.cov_train, &reg, &solver, None)?.theta,
        };
        write_matrix_file(&dir.join("lambda_opt.csv"), reg.weights(p).view())?;
        write_matrix_file(&dir.join("theta_true.csv"), truth.theta_true.view())?;
        write_matrix_file(&dir.join("theta_hat.csv"), theta_hat.view())?;
    }

    summary.seconds = started.elapsed().as_secs_f64();
    let file = BufWriter::new(File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(file, &summary).map_err(|e| Error::Io(e.into()))?;
    Ok(summary)
}

/// Exit status for a failed run: 4 for resource limits, 1 for I/O, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::ResourceLimit { .. } => 4,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    message: String,
    iteration: Option<usize>,
    exit_code: i32,
}

/// Parses `args`, runs, and reports; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match parse_config(args) {
        Ok(cfg) => cfg,
        Err(UsageError::Display(text)) => {
            println!("{text}");
            return 0;
        }
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    match run(&cfg) {
        Ok(_) => {
            println!("{}", cfg.output_dir.join("summary.json").display());
            0
        }
        Err(err) => {
            let code = exit_code(&err);
            let record = ErrorRecord {
                kind: err.kind(),
                message: err.to_string(),
                iteration: err.iteration(),
                exit_code: code,
            };
            let json = serde_json::to_string(&record).expect("error record serializes");
            eprintln!("{json}");
            if cfg.output_dir.is_dir() {
                if let Err(e) = fs::write(cfg.output_dir.join("error.json"), format!("{json}\n")) {
                    log::warn!("could not write error.json: {e}");
                }
            }
            code
        }
    }
}
