//! Weighted Graphical Lasso by proximal gradient descent.
//!
//! Minimizes `-log det Θ + <S, Θ> + Σ Λ_ij |Θ_ij|` over SPD `Θ` with the
//! iteration `Θ ← soft_threshold(Θ - γ (S - Θ^{-1}), γ Λ)`. The step `γ`
//! starts each iteration at a Barzilai–Borwein estimate and is shrunk until
//! the candidate is positive definite and the smooth part satisfies the
//! quadratic upper bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, logdet, spd_inverse, vec_index, CholeskyFactor, SupportSet, SymmetricMatrix};

/// Scalar `λ` or entrywise weights `Λ` for the ℓ1 penalty.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularization {
    Scalar(f64),
    Matrix(SymmetricMatrix),
}

impl Regularization {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            Regularization::Scalar(l) => {
                if !(l.is_finite() && *l >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "regularization must be finite and nonnegative, got {l}"
                    )));
                }
            }
            Regularization::Matrix(m) => {
                if m.dim() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        got: m.dim(),
                    });
                }
                if m.as_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidArgument(
                        "regularization matrix must be finite and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Weight applied to entry `(i, j)`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self {
            Regularization::Scalar(l) => *l,
            Regularization::Matrix(m) => m.get(i, j),
        }
    }

    /// `Λ` as a matrix (`λ 𝟙` in the scalar case).
    pub fn weights(&self, p: usize) -> SymmetricMatrix {
        match self {
            Regularization::Scalar(l) => SymmetricMatrix::constant(p, *l),
            Regularization::Matrix(m) => m.clone(),
        }
    }

    /// `Σ Λ_ij |Θ_ij|`.
    pub fn penalty(&self, theta: &SymmetricMatrix) -> f64 {
        match self {
            Regularization::Scalar(l) => l * theta.as_array().iter().map(|v| v.abs()).sum::<f64>(),
            Regularization::Matrix(m) => m
                .as_array()
                .iter()
                .zip(theta.as_array().iter())
                .map(|(w, t)| w * t.abs())
                .sum(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Regularization::Scalar(l) => *l == 0.0,
            Regularization::Matrix(m) => m.as_array().iter().all(|&v| v == 0.0),
        }
    }
}

/// Inner solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Sup-norm fixed-point residual at termination.
    pub tol: f64,
    /// First step; `None` uses `1 / max_i ‖S_i,:‖₂`.
    pub gamma_init: Option<f64>,
    pub backtrack_factor: f64,
    /// Entries of `Θ̂` with `|Θ_ij| <= support_tol` are off-support.
    pub support_tol: f64,
    /// Step reductions allowed within one iteration.
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-8,
            gamma_init: None,
            backtrack_factor: 0.5,
            support_tol: 1e-10,
            max_backtracks: 60,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter > 0
            && self.tol > 0.0
            && self.gamma_init.is_none_or(|g| g > 0.0 && g.is_finite())
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.support_tol > 0.0
            && self.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid solver config: {self:?}")))
        }
    }
}

/// A solved precision matrix together with the data needed to differentiate it.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub theta: SymmetricMatrix,
    pub reg: Regularization,
    /// Step at which the fixed point was verified.
    pub gamma: f64,
    pub support: SupportSet,
    pub support_tol: f64,
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

impl PrecisionEstimate {
    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    /// `Θ̂^{-1}`.
    pub fn inverse(&self) -> Result<SymmetricMatrix> {
        Ok(spd_inverse(&cholesky(&self.theta)?))
    }
}

/// `sign(z) max(|z| - t, 0)` entrywise.
pub fn soft_threshold(z: &SymmetricMatrix, thresholds: &SymmetricMatrix) -> SymmetricMatrix {
    z.zip_map(thresholds, soft_threshold_scalar)
}

#[inline]
pub fn soft_threshold_scalar(z: f64, t: f64) -> f64 {
    let m = z.abs() - t;
    if m > 0.0 {
        m.copysign(z)
    } else {
        0.0
    }
}

/// `-log det Θ + <S, Θ> + Σ Λ_ij |Θ_ij|`.
pub fn objective(theta: &SymmetricMatrix, s: &SymmetricMatrix, reg: &Regularization) -> Result<f64> {
    let f = cholesky(theta)?;
    Ok(smooth_part(&f, theta, s) + reg.penalty(theta))
}

fn smooth_part(factor: &CholeskyFactor, theta: &SymmetricMatrix, s: &SymmetricMatrix) -> f64 {
    -logdet(factor) + s.frobenius_dot(theta)
}

/// `‖Θ - F(Θ - γ (S - Θ^{-1}), Λ)‖_∞` for a given step.
pub fn fixed_point_residual(
    theta: &SymmetricMatrix,
    s: &SymmetricMatrix,
    reg: &Regularization,
    gamma: f64,
) -> Result<f64> {
    let inv = spd_inverse(&cholesky(theta)?);
    let p = theta.dim();
    let mut worst = 0.0_f64;
    for i in 0..p {
        for j in 0..=i {
            let z = theta.get(i, j) - gamma * (s.get(i, j) - inv.get(i, j));
            let next = soft_threshold_scalar(z, gamma * reg.weight(i, j));
            worst = worst.max((theta.get(i, j) - next).abs());
        }
    }
    Ok(worst)
}

/// Entries `|Θ_ij| > support_tol`, in column-major vec order.
pub fn support_of(theta: &SymmetricMatrix, support_tol: f64) -> SupportSet {
    let p = theta.dim();
    let mut mask = vec![false; p * p];
    for j in 0..p {
        for i in 0..p {
            mask[vec_index(i, j, p)] = theta.get(i, j).abs() > support_tol;
        }
    }
    SupportSet::from_mask(mask)
}

fn default_gamma(s: &SymmetricMatrix) -> f64 {
    let p = s.dim();
    let a = s.as_array();
    let max_row = (0..p)
        .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let g = 1.0 / max_row.sqrt();
    if g.is_finite() && g > 0.0 {
        g
    } else {
        1.0
    }
}

const GAMMA_MIN: f64 = 1e-14;
const GAMMA_MAX: f64 = 1e8;

/// Solves the weighted GLASSO for covariance `s`.
///
/// Fails with `NotPositiveDefinite` when the unpenalized problem has a
/// singular `S`, or when no step in `max_backtracks` reductions keeps the
/// iterate positive definite.
pub fn solve(
    s: &SymmetricMatrix,
    reg: &Regularization,
    config: &SolverConfig,
    warm_start: Option<&SymmetricMatrix>,
) -> Result<PrecisionEstimate> {
    config.validate()?;
    let p = s.dim();
    reg.validate(p)?;
    let weights = reg.weights(p);

    if reg.is_zero() {
        // unpenalized: bounded iff S is SPD
        cholesky(s)?;
    }

    let start = warm_start
        .filter(|w| w.dim() == p)
        .and_then(|w| cholesky(w).ok().map(|f| (w.clone(), f)));
    let (mut theta, mut factor) = match start {
        Some(v) => v,
        None => {
            let mut diag = Vec::with_capacity(p);
            for i in 0..p {
                let d = s.get(i, i) + weights.get(i, i);
                if !(d > 0.0) {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: d });
                }
                diag.push(1.0 / d);
            }
            let t = SymmetricMatrix::from_diag(&diag);
            let f = cholesky(&t)?;
            (t, f)
        }
    };
    let mut inv = spd_inverse(&factor);
    let mut f_smooth = smooth_part(&factor, &theta, s);
    let mut gamma = config.gamma_init.unwrap_or_else(|| default_gamma(s));

    for it in 0..config.max_iter {
        let grad = s.sub(&inv);
        let mut accepted = None;
        let mut last_pivot = (0, f64::NAN);
        for _ in 0..config.max_backtracks {
            let step = theta.sub(&grad.scale(gamma));
            let cand = soft_threshold(&step, &weights.scale(gamma));
            let delta = cand.sub(&theta);
            let residual = delta.max_abs();
            // res(2γ) <= 2 res(γ), so halving tol covers steps up to 2γ
            if residual <= 0.5 * config.tol {
                log::trace!("glasso converged at iteration {it}, residual {residual:.3e}");
                return Ok(PrecisionEstimate {
                    support: support_of(&theta, config.support_tol),
                    objective: f_smooth + reg.penalty(&theta),
                    theta,
                    reg: reg.clone(),
                    gamma,
                    support_tol: config.support_tol,
                    fixed_point_residual: residual,
                    iterations: it,
                });
            }
            match cholesky(&cand) {
                Ok(cf) => {
                    let f_cand = smooth_part(&cf, &cand, s);
                    let quad = f_smooth + grad.frobenius_dot(&delta) + delta.frobenius_dot(&delta) / (2.0 * gamma);
                    let slack = 1e-12 * (1.0 + f_smooth.abs());
                    if f_cand <= quad + slack {
                        accepted = Some((cand, cf, f_cand, delta));
                        break;
                    }
                }
                Err(Error::NotPositiveDefinite { index, pivot }) => last_pivot = (index, pivot),
                Err(e) => return Err(e),
            }
            gamma *= config.backtrack_factor;
        }
        let Some((cand, cf, f_cand, delta)) = accepted else {
            return Err(Error::NotPositiveDefinite {
                index: last_pivot.0,
                pivot: last_pivot.1,
            });
        };
        let new_inv = spd_inverse(&cf);
        // Barzilai–Borwein step from the change in Θ and in the gradient -Θ^{-1}
        let dgrad = inv.sub(&new_inv);
        let sy = delta.frobenius_dot(&dgrad);
        let ss = delta.frobenius_dot(&delta);
        if sy > 0.0 && ss > 0.0 {
            gamma = (ss / sy).clamp(GAMMA_MIN, GAMMA_MAX);
        }
        theta = cand;
        factor = cf;
        inv = new_inv;
        f_smooth = f_cand;
    }
    let _ = factor;
    let residual = fixed_point_residual(&theta, s, reg, gamma)?;
    Err(Error::NotConverged {
        iterations: config.max_iter,
        residual,
    })
}

/// Largest violation of the first-order conditions at `theta`.
///
/// On the support `(Θ^{-1} - S)_ij` must equal `Λ_ij sign Θ_ij`; off the
/// support `|Θ^{-1} - S|_ij <= Λ_ij`.
pub fn optimality_violation(
    theta: &SymmetricMatrix,
    s: &SymmetricMatrix,
    reg: &Regularization,
    support_tol: f64,
) -> Result<f64> {
    let inv = spd_inverse(&cholesky(theta)?);
    let p = theta.dim();
    let mut worst = 0.0_f64;
    for i in 0..p {
        for j in 0..=i {
            let g = inv.get(i, j) - s.get(i, j);
            let w = reg.weight(i, j);
            let t = theta.get(i, j);
            let v = if t.abs() > support_tol {
                (g - w * t.signum()).abs()
            } else {
                (g.abs() - w).max(0.0)
            };
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

pub fn check_optimality(est: &PrecisionEstimate, s: &SymmetricMatrix) -> Result<f64> {
    optimality_violation(&est.theta, s, &est.reg, est.support_tol)
}

/// Outcome of the strict complementarity test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonDegeneracy {
    pub holds: bool,
    /// `min (Λ_ij - |Θ^{-1} - S|_ij)` over off-support entries; `+∞` if none.
    pub min_slack: f64,
}

/// Checks `|Θ^{-1} - S|_ij <= Λ_ij - margin` on every off-support entry.
pub fn check_nondegeneracy(est: &PrecisionEstimate, s: &SymmetricMatrix, margin: f64) -> Result<NonDegeneracy> {
    let inv = est.inverse()?;
    let p = est.dim();
    let mut min_slack = f64::INFINITY;
    for j in 0..p {
        for i in 0..p {
            if est.support.contains(vec_index(i, j, p)) {
                continue;
            }
            let slack = est.reg.weight(i, j) - (inv.get(i, j) - s.get(i, j)).abs();
            min_slack = min_slack.min(slack);
        }
    }
    Ok(NonDegeneracy {
        holds: min_slack >= margin,
        min_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sym(a: ndarray::Array2<f64>) -> SymmetricMatrix {
        SymmetricMatrix::try_from_array(a).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig::default().with_tol(1e-11)
    }

    #[test]
    fn soft_threshold_examples() {
        let z = SymmetricMatrix::zeros(3);
        assert_eq!(soft_threshold(&z, &SymmetricMatrix::constant(3, 0.4)), z);
        assert_eq!(soft_threshold_scalar(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold_scalar(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold_scalar(-2.0, 0.5), -1.5);
        let z = sym(array![[1.0, -2.0], [-2.0, 0.25]]);
        assert_eq!(soft_threshold(&z, &SymmetricMatrix::zeros(2)), z);
    }

    #[test]
    fn objective_examples() {
        let i3 = SymmetricMatrix::identity(3);
        assert_eq!(objective(&i3, &i3, &Regularization::Scalar(0.0)).unwrap(), 3.0);
        let v = objective(
            &SymmetricMatrix::identity(2),
            &SymmetricMatrix::zeros(2),
            &Regularization::Scalar(1.0),
        )
        .unwrap();
        assert_eq!(v, 2.0);
        let v = objective(
            &SymmetricMatrix::from_diag(&[2.0, 2.0]),
            &SymmetricMatrix::identity(2),
            &Regularization::Scalar(0.0),
        )
        .unwrap();
        assert!((v - (4.0 - 2.0 * 2f64.ln())).abs() < 1e-14);
        assert!(objective(
            &SymmetricMatrix::from_diag(&[1.0, -1.0]),
            &SymmetricMatrix::identity(2),
            &Regularization::Scalar(0.0)
        )
        .is_err());
    }

    #[test]
    fn unpenalized_identity() {
        let s = SymmetricMatrix::identity(4);
        let est = solve(&s, &Regularization::Scalar(0.0), &SolverConfig::default(), None).unwrap();
        assert!(est.theta.sub(&s).max_abs() <= 1e-8);
        assert!(est.fixed_point_residual <= 1e-8);
    }

    #[test]
    fn large_lambda_gives_closed_form_diagonal() {
        let s = sym(array![[1.0, 0.3, -0.2], [0.3, 2.0, 0.1], [-0.2, 0.1, 1.5]]);
        let lam = 0.35;
        let est = solve(&s, &Regularization::Scalar(lam), &tight(), None).unwrap();
        assert!(est.theta.is_diagonal(0.0));
        for i in 0..3 {
            assert!((est.theta.get(i, i) - 1.0 / (s.get(i, i) + lam)).abs() <= 1e-10);
        }
        assert!(check_optimality(&est, &s).unwrap() <= 1e-8);
        let nd = check_nondegeneracy(&est, &s, 1e-3).unwrap();
        assert!(nd.holds);
        assert!(nd.min_slack >= lam - 0.3 - 1e-12);
    }

    #[test]
    fn boundary_lambda_is_degenerate() {
        let s = sym(array![[1.0, 0.3, -0.2], [0.3, 2.0, 0.1], [-0.2, 0.1, 1.5]]);
        let est = solve(&s, &Regularization::Scalar(0.3), &tight(), None).unwrap();
        assert!(est.theta.is_diagonal(1e-8));
        let nd = check_nondegeneracy(&est, &s, 1e-9).unwrap();
        assert!(!nd.holds);
    }

    #[test]
    fn unpenalized_solution_has_no_off_support() {
        let s = sym(array![[2.0, 0.5], [0.5, 1.0]]);
        let est = solve(&s, &Regularization::Scalar(0.0), &tight(), None).unwrap();
        let nd = check_nondegeneracy(&est, &s, 1.0).unwrap();
        assert!(nd.holds && nd.min_slack.is_infinite());
        let inv = spd_inverse(&cholesky(&s).unwrap());
        assert!(est.theta.sub(&inv).max_abs() < 1e-9);
    }

    #[test]
    fn exact_inverse_has_zero_violation() {
        let s = sym(array![[2.0, 0.5], [0.5, 1.0]]);
        let inv = spd_inverse(&cholesky(&s).unwrap());
        let v = optimality_violation(&inv, &s, &Regularization::Scalar(0.0), 1e-10).unwrap();
        assert!(v <= 1e-14);
    }

    #[test]
    fn perturbed_solution_is_detected() {
        let s = sym(array![[1.0, 0.4, 0.1], [0.4, 1.2, 0.3], [0.1, 0.3, 0.9]]);
        let est = solve(&s, &Regularization::Scalar(0.1), &tight(), None).unwrap();
        let mut bad = est.clone();
        bad.theta = est.theta.add(&SymmetricMatrix::identity(3).scale(0.1));
        assert!(check_optimality(&bad, &s).unwrap() > 0.01);
    }

    #[test]
    fn two_by_two_matches_grid_oracle() {
        let s = sym(array![[1.0, 0.45], [0.45, 0.8]]);
        let reg = Regularization::Scalar(0.2);
        let est = solve(&s, &reg, &tight(), None).unwrap();
        let best = brute_force_2x2(&s, &reg, &est.theta);
        assert!((est.objective - best).abs() <= 1e-4, "{} vs {}", est.objective, best);
        assert!(est.objective <= best + 1e-12);
    }

    // coarse-to-fine grid over (θ11, θ22, θ12) restricted to the PD cone
    fn brute_force_2x2(s: &SymmetricMatrix, reg: &Regularization, hint: &SymmetricMatrix) -> f64 {
        let eval = |a: f64, b: f64, c: f64| -> f64 {
            if a <= 0.0 || b <= 0.0 || a * b - c * c <= 0.0 {
                return f64::INFINITY;
            }
            let t = SymmetricMatrix::from_lower_fn(2, |i, j| match (i, j) {
                (0, 0) => a,
                (1, 1) => b,
                _ => c,
            });
            objective(&t, s, reg).unwrap()
        };
        // start from a box that contains the solution but is not centered on it
        let mut center = [1.0, 1.0, 0.0];
        let mut width = [2.0, 2.0, 1.0];
        let _ = hint;
        let mut best = f64::INFINITY;
        for _ in 0..30 {
            let n = 20;
            let mut arg = center;
            for ia in 0..=n {
                for ib in 0..=n {
                    for ic in 0..=n {
                        let a = center[0] + width[0] * (ia as f64 / n as f64 - 0.5);
                        let b = center[1] + width[1] * (ib as f64 / n as f64 - 0.5);
                        let c = center[2] + width[2] * (ic as f64 / n as f64 - 0.5);
                        let v = eval(a, b, c);
                        if v < best {
                            best = v;
                            arg = [a, b, c];
                        }
                    }
                }
            }
            center = arg;
            for w in width.iter_mut() {
                *w *= 0.5;
            }
        }
        best
    }

    #[test]
    fn fixed_point_holds_for_nearby_steps() {
        let s = sym(array![[1.0, 0.4, 0.1], [0.4, 1.2, 0.3], [0.1, 0.3, 0.9]]);
        let reg = Regularization::Scalar(0.12);
        let cfg = SolverConfig::default();
        let est = solve(&s, &reg, &cfg, None).unwrap();
        for g in [0.1 * est.gamma, est.gamma, 2.0 * est.gamma] {
            assert!(fixed_point_residual(&est.theta, &s, &reg, g).unwrap() <= cfg.tol);
        }
    }

    #[test]
    fn scalar_and_constant_matrix_agree() {
        let s = sym(array![[1.0, 0.4, 0.1], [0.4, 1.2, 0.3], [0.1, 0.3, 0.9]]);
        let cfg = SolverConfig::default();
        let a = solve(&s, &Regularization::Scalar(0.1), &cfg, None).unwrap();
        let b = solve(
            &s,
            &Regularization::Matrix(SymmetricMatrix::constant(3, 0.1)),
            &cfg,
            None,
        )
        .unwrap();
        assert!(a.theta.sub(&b.theta).max_abs() <= 10.0 * cfg.tol);
    }

    #[test]
    fn singular_covariance_without_penalty_fails() {
        let s = sym(array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(
            solve(&s, &Regularization::Scalar(0.0), &SolverConfig::default(), None),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let s = sym(array![[1.0, 0.4, 0.1], [0.4, 1.2, 0.3], [0.1, 0.3, 0.9]]);
        let cfg = SolverConfig {
            max_iter: 1,
            tol: 1e-14,
            ..SolverConfig::default()
        };
        assert!(matches!(
            solve(&s, &Regularization::Scalar(0.01), &cfg, None),
            Err(Error::NotConverged { iterations: 1, .. })
        ));
    }

    #[test]
    fn rejects_negative_regularization() {
        let s = SymmetricMatrix::identity(2);
        assert!(solve(&s, &Regularization::Scalar(-1.0), &SolverConfig::default(), None).is_err());
        let bad = Regularization::Matrix(SymmetricMatrix::constant(2, -0.1));
        assert!(solve(&s, &bad, &SolverConfig::default(), None).is_err());
    }

    #[test]
    fn support_consistency_under_nondegeneracy() {
        let s = sym(array![[1.0, 0.4, 0.05], [0.4, 1.2, 0.3], [0.05, 0.3, 0.9]]);
        let reg = Regularization::Scalar(0.1);
        let est = solve(&s, &reg, &tight(), None).unwrap();
        assert!(check_nondegeneracy(&est, &s, 1e-4).unwrap().holds);
        let inv = est.inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let z = est.theta.get(i, j) - est.gamma * (s.get(i, j) - inv.get(i, j));
                let on = z.abs() > est.gamma * 0.1;
                assert_eq!(on, est.support.contains(vec_index(i, j, 3)));
            }
        }
    }
}
