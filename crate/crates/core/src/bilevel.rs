//! Outer loop: hypergradient descent in log-space and the grid baseline.
//!
//! Regularization is parametrized as `λ = exp(α)` (entrywise `Λ_kl =
//! exp(α_kl)` in the weighted case) and `α` follows fixed-step gradient
//! descent, so every iterate stays strictly positive.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glasso::{solve, PrecisionEstimate, Regularization, SolverConfig};
use crate::implicit_diff::{
    criterion_holdout, hypergradient_scalar, hypergradient_weighted, jacobian_scalar, relative_error,
    support_from_estimate, DiffConfig,
};
use crate::linalg::SymmetricMatrix;

/// How the starting `λ` is derived from the training covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaInitPolicy {
    /// `max_{i≠j} |S_ij|`, the smallest `λ` with a diagonal solution.
    #[default]
    OffdiagMax,
    /// `log(max_ij |S_ij|)` taken literally.
    PaperLiteral,
}

impl FromStr for LambdaInitPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "offdiag-max" => Ok(Self::OffdiagMax),
            "paper-literal" => Ok(Self::PaperLiteral),
            other => Err(format!("unknown lambda init policy {other:?}")),
        }
    }
}

impl fmt::Display for LambdaInitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OffdiagMax => "offdiag-max",
            Self::PaperLiteral => "paper-literal",
        })
    }
}

/// Smallest `λ` for which the GLASSO estimate is diagonal.
pub fn lambda_init(cov_train: &SymmetricMatrix) -> Result<f64> {
    lambda_init_with(cov_train, LambdaInitPolicy::OffdiagMax)
}

pub fn lambda_init_with(cov_train: &SymmetricMatrix, policy: LambdaInitPolicy) -> Result<f64> {
    let value = match policy {
        LambdaInitPolicy::OffdiagMax => cov_train.max_abs_off_diagonal(),
        LambdaInitPolicy::PaperLiteral => cov_train.max_abs().ln(),
    };
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::DegenerateInput(format!(
            "initial regularization under {policy} is {value}, not positive"
        )))
    }
}

/// Factor applied to [`lambda_init`] to start strictly inside the diagonal regime.
pub const START_MARGIN: f64 = 1.01;

/// Starting `λ` of a scalar run under `policy`.
pub fn scalar_start(cov_train: &SymmetricMatrix, policy: LambdaInitPolicy) -> Result<f64> {
    let lam = lambda_init_with(cov_train, policy)?;
    Ok(match policy {
        LambdaInitPolicy::OffdiagMax => START_MARGIN * lam,
        LambdaInitPolicy::PaperLiteral => lam,
    })
}

/// Outer loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelConfig {
    /// Fixed step `ρ` on `α`.
    pub step_size: f64,
    pub max_outer_iter: usize,
    /// Stop once the sup norm of the `α`-gradient is at most this.
    pub outer_tol: f64,
    /// Starting regularization (in `λ`-space; `α = log λ`).
    pub init: Regularization,
    pub warm_start: bool,
    pub solver: SolverConfig,
    pub diff: DiffConfig,
}

impl BilevelConfig {
    pub fn new(init: Regularization) -> Self {
        Self {
            step_size: 0.1,
            max_outer_iter: 200,
            outer_tol: 1e-6,
            init,
            warm_start: true,
            solver: SolverConfig::default(),
            diff: DiffConfig::default(),
        }
    }

    /// Scalar run from the policy's starting value; the default policy starts
    /// just above `λ_init`, where the support test is well defined.
    pub fn scalar_from_data(cov_train: &SymmetricMatrix, policy: LambdaInitPolicy) -> Result<Self> {
        Ok(Self::new(Regularization::Scalar(scalar_start(cov_train, policy)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) || self.max_outer_iter == 0 || !(self.outer_tol >= 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid bilevel config: rho = {}, max_outer_iter = {}, outer_tol = {}",
                self.step_size, self.max_outer_iter, self.outer_tol
            )));
        }
        self.solver.validate()
    }
}

/// Regularization summary written per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum LambdaSummary {
    Scalar {
        lambda: f64,
    },
    Matrix {
        lambda_min: f64,
        lambda_max: f64,
        lambda_mean: f64,
    },
}

impl LambdaSummary {
    pub fn of(reg: &Regularization) -> Self {
        match reg {
            Regularization::Scalar(l) => Self::Scalar { lambda: *l },
            Regularization::Matrix(m) => {
                let a = m.as_array();
                let min = a.iter().copied().fold(f64::INFINITY, f64::min);
                let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = a.iter().sum::<f64>() / a.len() as f64;
                Self::Matrix {
                    lambda_min: min,
                    lambda_max: max,
                    lambda_mean: mean,
                }
            }
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterRecord {
    pub iter: usize,
    pub lambda: LambdaSummary,
    pub criterion: f64,
    /// Sup norm of the gradient with respect to `α`.
    pub hypergrad_norm: f64,
    pub inner_iters: usize,
    pub rel_error: Option<f64>,
    pub seconds: f64,
}

/// Append-only log of an outer run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub records: Vec<OuterRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&OuterRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&OuterRecord> {
        self.records.last()
    }

    /// CSV with columns `iter, lambda…, criterion, hypergrad_norm, inner_iters, rel_error, seconds`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, with_seconds: bool) -> Result<()> {
        let matrix = matches!(
            self.records.first().map(|r| r.lambda),
            Some(LambdaSummary::Matrix { .. })
        );
        let mut wr = TrajectoryWriter::new(w, matrix, with_seconds)?;
        for r in &self.records {
            wr.write(r)?;
        }
        Ok(())
    }
}

/// Streams trajectory rows to CSV, flushing after each one.
pub struct TrajectoryWriter<W: std::io::Write> {
    inner: csv::Writer<W>,
    with_seconds: bool,
}

impl<W: std::io::Write> TrajectoryWriter<W> {
    pub fn new(w: W, matrix: bool, with_seconds: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().from_writer(w);
        let mut header: Vec<&str> = vec!["iter"];
        if matrix {
            header.extend(["lambda_min", "lambda_max", "lambda_mean"]);
        } else {
            header.push("lambda");
        }
        header.extend(["criterion", "hypergrad_norm", "inner_iters", "rel_error"]);
        if with_seconds {
            header.push("seconds");
        }
        inner.write_record(&header)?;
        inner.flush()?;
        Ok(Self { inner, with_seconds })
    }

    pub fn write(&mut self, r: &OuterRecord) -> Result<()> {
        use crate::io::format_f64;
        let mut row = vec![r.iter.to_string()];
        match r.lambda {
            LambdaSummary::Scalar { lambda } => row.push(format_f64(lambda)),
            LambdaSummary::Matrix {
                lambda_min,
                lambda_max,
                lambda_mean,
            } => row.extend([format_f64(lambda_min), format_f64(lambda_max), format_f64(lambda_mean)]),
        }
        row.push(format_f64(r.criterion));
        row.push(format_f64(r.hypergrad_norm));
        row.push(r.inner_iters.to_string());
        row.push(r.rel_error.map(format_f64).unwrap_or_default());
        if self.with_seconds {
            row.push(format!("{:.6}", r.seconds));
        }
        self.inner.write_record(&row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient sup norm fell under `outer_tol`.
    Converged,
    /// `max_outer_iter` steps taken without meeting `outer_tol`.
    NotConverged,
    /// A step landed on a degenerate support twice in a row.
    DegenerateSupport,
}

/// Result of a tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    /// Regularization of the last evaluated iterate.
    pub reg: Regularization,
    pub estimate: PrecisionEstimate,
    pub criterion: f64,
    pub trajectory: Trajectory,
    pub stop: StopReason,
}

impl TuneOutcome {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn lambda(&self) -> Option<f64> {
        match self.reg {
            Regularization::Scalar(l) => Some(l),
            Regularization::Matrix(_) => None,
        }
    }
}

/// Evaluation of the outer objective and its `α`-gradient at one point.
struct Evaluation {
    estimate: PrecisionEstimate,
    criterion: f64,
    /// `dL/dα`, one entry (scalar) or `p x p` (matrix).
    grad_alpha: Alpha,
}

/// Log-space parameters.
#[derive(Debug, Clone, PartialEq)]
enum Alpha {
    Scalar(f64),
    Matrix(SymmetricMatrix),
}

impl Alpha {
    fn from_reg(reg: &Regularization) -> Result<Self> {
        match reg {
            Regularization::Scalar(l) if *l > 0.0 => Ok(Alpha::Scalar(l.ln())),
            Regularization::Matrix(m) if m.as_array().iter().all(|&v| v > 0.0) => Ok(Alpha::Matrix(m.map(f64::ln))),
            _ => Err(Error::InvalidArgument(
                "initial regularization must be strictly positive".into(),
            )),
        }
    }

    fn to_reg(&self) -> Regularization {
        match self {
            Alpha::Scalar(a) => Regularization::Scalar(a.exp()),
            Alpha::Matrix(m) => Regularization::Matrix(m.map(f64::exp)),
        }
    }

    fn step(&self, grad: &Alpha, rho: f64) -> Alpha {
        match (self, grad) {
            (Alpha::Scalar(a), Alpha::Scalar(g)) => Alpha::Scalar(a - rho * g),
            (Alpha::Matrix(a), Alpha::Matrix(g)) => Alpha::Matrix(a.sub(&g.scale(rho))),
            _ => unreachable!("mixed parametrizations"),
        }
    }

    fn norm(&self) -> f64 {
        match self {
            Alpha::Scalar(g) => g.abs(),
            Alpha::Matrix(g) => g.max_abs(),
        }
    }
}

fn evaluate(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    reg: &Regularization,
    config: &BilevelConfig,
    warm: Option<&SymmetricMatrix>,
) -> Result<Evaluation> {
    let estimate = solve(cov_train, reg, &config.solver, warm)?;
    let support = support_from_estimate(&estimate, cov_train, &config.diff)?;
    let crit = criterion_holdout(&estimate.theta, cov_test)?;
    let grad_alpha = match reg {
        Regularization::Scalar(l) => {
            let jac = jacobian_scalar(&estimate, &support, &config.diff)?;
            Alpha::Scalar(l * hypergradient_scalar(&jac, &crit.gradient))
        }
        Regularization::Matrix(weights) => {
            let g = hypergradient_weighted(&estimate, &support, &crit.gradient, &config.diff)?;
            Alpha::Matrix(g.symmetrized().zip_map(weights, |g, w| g * w))
        }
    };
    Ok(Evaluation {
        estimate,
        criterion: crit.value,
        grad_alpha,
    })
}

fn run(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    config: &BilevelConfig,
    theta_true: Option<&SymmetricMatrix>,
    observer: &mut dyn FnMut(&OuterRecord),
) -> Result<TuneOutcome> {
    config.validate()?;
    let p = cov_train.dim();
    if cov_test.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: cov_test.dim(),
        });
    }
    config.init.validate(p)?;
    let mut alpha = Alpha::from_reg(&config.init)?;
    // exp(log λ) may differ from λ in the last bit; report the start exactly
    let mut reg = config.init.clone();
    let mut trajectory = Trajectory::default();
    let mut previous: Option<(Alpha, Regularization, Evaluation)> = None;
    let rho = config.step_size;

    for k in 0..=config.max_outer_iter {
        let started = Instant::now();
        let warm = if config.warm_start {
            previous.as_ref().map(|(_, _, e)| &e.estimate.theta)
        } else {
            None
        };
        let eval = match evaluate(cov_train, cov_test, &reg, config, warm) {
            Ok(e) => e,
            Err(Error::DegenerateSupport { .. }) if previous.is_some() => {
                let (prev_alpha, _, prev_eval) = previous.as_ref().expect("checked");
                let retry = prev_alpha.step(&prev_eval.grad_alpha, 0.5 * rho);
                log::debug!("outer iteration {k}: degenerate support, retrying with rho/2");
                let retry_reg = retry.to_reg();
                match evaluate(cov_train, cov_test, &retry_reg, config, warm) {
                    Ok(e) => {
                        reg = retry_reg;
                        alpha = retry;
                        e
                    }
                    Err(Error::DegenerateSupport { .. }) => {
                        let (_, prev_reg, prev_eval) = previous.expect("checked");
                        return Ok(TuneOutcome {
                            reg: prev_reg,
                            criterion: prev_eval.criterion,
                            estimate: prev_eval.estimate,
                            trajectory,
                            stop: StopReason::DegenerateSupport,
                        });
                    }
                    Err(e) => return Err(e.at_iteration(k)),
                }
            }
            Err(e) => return Err(e.at_iteration(k)),
        };
        let norm = eval.grad_alpha.norm();
        let record = OuterRecord {
            iter: k,
            lambda: LambdaSummary::of(&reg),
            criterion: eval.criterion,
            hypergrad_norm: norm,
            inner_iters: eval.estimate.iterations,
            rel_error: theta_true.map(|t| relative_error(&eval.estimate.theta, t)),
            seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        trajectory.records.push(record);
        log::debug!(
            "outer {k}: {:?} C = {:.10} |dL/dα| = {norm:.3e}",
            LambdaSummary::of(&reg),
            eval.criterion
        );
        let done = if norm <= config.outer_tol {
            Some(StopReason::Converged)
        } else if k == config.max_outer_iter {
            Some(StopReason::NotConverged)
        } else {
            None
        };
        if let Some(stop) = done {
            return Ok(TuneOutcome {
                reg,
                criterion: eval.criterion,
                estimate: eval.estimate,
                trajectory,
                stop,
            });
        }
        let next = alpha.step(&eval.grad_alpha, rho);
        previous = Some((alpha, std::mem::replace(&mut reg, next.to_reg()), eval));
        alpha = next;
    }
    unreachable!("loop returns at max_outer_iter")
}

/// Hypergradient descent on `α = log λ`.
pub fn tune_scalar(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    config: &BilevelConfig,
    theta_true: Option<&SymmetricMatrix>,
) -> Result<TuneOutcome> {
    tune_scalar_observed(cov_train, cov_test, config, theta_true, &mut |_| {})
}

/// [`tune_scalar`], handing each record to `observer` as soon as it exists.
pub fn tune_scalar_observed(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    config: &BilevelConfig,
    theta_true: Option<&SymmetricMatrix>,
    observer: &mut dyn FnMut(&OuterRecord),
) -> Result<TuneOutcome> {
    if !matches!(config.init, Regularization::Scalar(_)) {
        return Err(Error::InvalidArgument(
            "tune_scalar needs a scalar initial value".into(),
        ));
    }
    run(cov_train, cov_test, config, theta_true, observer)
}

/// Hypergradient descent on `α_kl = log Λ_kl` with a symmetrized gradient.
///
/// A scalar `init` is expanded to the constant matrix `λ 𝟙`.
pub fn tune_matrix(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    config: &BilevelConfig,
    theta_true: Option<&SymmetricMatrix>,
) -> Result<TuneOutcome> {
    tune_matrix_observed(cov_train, cov_test, config, theta_true, &mut |_| {})
}

/// [`tune_matrix`], handing each record to `observer` as soon as it exists.
pub fn tune_matrix_observed(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    config: &BilevelConfig,
    theta_true: Option<&SymmetricMatrix>,
    observer: &mut dyn FnMut(&OuterRecord),
) -> Result<TuneOutcome> {
    let mut cfg = config.clone();
    if let Regularization::Scalar(l) = cfg.init {
        cfg.init = Regularization::Matrix(SymmetricMatrix::constant(cov_train.dim(), l));
    }
    run(cov_train, cov_test, &cfg, theta_true, observer)
}

/// `n` log-spaced values from `lo` to `hi`, ascending.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else if i == 0 {
                lo
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// `n` points log-spaced over `[λ_init 10^-3, λ_init]`.
pub fn default_grid(lambda_init: f64, n: usize) -> Vec<f64> {
    log_grid(lambda_init * 1e-3, lambda_init, n)
}

/// One evaluated grid value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub lambda: f64,
    /// `None` when the inner solve failed at this point.
    pub criterion: Option<f64>,
    pub rel_error: Option<f64>,
    pub inner_iters: Option<usize>,
}

/// Criterion curve over a grid, in ascending `λ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best_index: usize,
    pub best_lambda: f64,
    pub best_criterion: f64,
}

impl GridResult {
    /// Larger gap between the best grid value and its neighbours.
    pub fn cell_width_at_best(&self) -> f64 {
        let i = self.best_index;
        let l = &self.points;
        let left = if i > 0 { l[i].lambda - l[i - 1].lambda } else { 0.0 };
        let right = if i + 1 < l.len() {
            l[i + 1].lambda - l[i].lambda
        } else {
            0.0
        };
        left.max(right)
    }

    /// Index minimizing the relative error, when known.
    pub fn best_rel_error_index(&self) -> Option<usize> {
        self.points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.rel_error.map(|r| (i, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        use crate::io::format_f64;
        let mut wr = csv::WriterBuilder::new().from_writer(w);
        wr.write_record(["lambda", "criterion", "rel_error"])?;
        for p in &self.points {
            wr.write_record([
                format_f64(p.lambda),
                p.criterion.map(format_f64).unwrap_or_default(),
                p.rel_error.map(format_f64).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn grid_point(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    lambda: f64,
    solver: &SolverConfig,
    warm: Option<&SymmetricMatrix>,
    theta_true: Option<&SymmetricMatrix>,
) -> (GridPoint, Option<SymmetricMatrix>) {
    let outcome = solve(cov_train, &Regularization::Scalar(lambda), solver, warm)
        .and_then(|est| criterion_holdout(&est.theta, cov_test).map(|c| (est, c.value)));
    match outcome {
        Ok((est, value)) => (
            GridPoint {
                lambda,
                criterion: Some(value),
                rel_error: theta_true.map(|t| relative_error(&est.theta, t)),
                inner_iters: Some(est.iterations),
            },
            Some(est.theta),
        ),
        Err(e) => {
            log::warn!("grid point λ = {lambda:e} failed: {e}");
            (
                GridPoint {
                    lambda,
                    criterion: None,
                    rel_error: None,
                    inner_iters: None,
                },
                None,
            )
        }
    }
}

/// Evaluates `C(Θ̂(λ))` on every grid value.
///
/// With warm starts the sweep runs from the largest `λ` down, reusing each
/// solution; without them the points are solved in parallel. Failed points
/// are kept with a missing criterion.
pub fn grid_search(
    cov_train: &SymmetricMatrix,
    cov_test: &SymmetricMatrix,
    grid: &[f64],
    solver: &SolverConfig,
    warm_start: bool,
    theta_true: Option<&SymmetricMatrix>,
) -> Result<GridResult> {
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(
            "grid must be nonempty with positive values".into(),
        ));
    }
    solver.validate()?;
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut points: Vec<GridPoint> = if warm_start {
        let mut warm: Option<SymmetricMatrix> = None;
        let mut out: Vec<GridPoint> = lambdas
            .iter()
            .rev()
            .map(|&l| {
                let (pt, theta) = grid_point(cov_train, cov_test, l, solver, warm.as_ref(), theta_true);
                if theta.is_some() {
                    warm = theta;
                }
                pt
            })
            .collect();
        out.reverse();
        out
    } else {
        let threads = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(lambdas.len());
        let chunk = lambdas.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = lambdas
                .chunks(chunk)
                .map(|ls| {
                    scope.spawn(move || {
                        ls.iter()
                            .map(|&l| grid_point(cov_train, cov_test, l, solver, None, theta_true).0)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("grid worker panicked"))
                .collect()
        })
    };
    points.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));

    let (best_index, best_criterion) = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.criterion.map(|c| (i, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::DegenerateInput("every grid point failed".into()))?;
    Ok(GridResult {
        best_lambda: points[best_index].lambda,
        best_index,
        best_criterion,
        points,
    })
}
