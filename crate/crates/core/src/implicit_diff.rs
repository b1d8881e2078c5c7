//! Jacobians of the GLASSO solution with respect to its regularization.
//!
//! Differentiating the proximal-gradient fixed point
//! `Θ̂ = F(Θ̂ - γ (S - Θ̂^{-1}), Λ)` at a non-degenerate solution gives, on
//! the support `𝒮` of `Θ̂`,
//!
//! ```text
//! (Θ̂^{-1} ⊗ Θ̂^{-1})[𝒮, 𝒮] vec(J)[𝒮] = vec(E)[𝒮] / γ,   vec(J)[𝒮ᶜ] = 0,
//! ```
//!
//! with `E_ij = -γ sign(Ẑ_ij)` on the support. The step `γ` cancels, so the
//! Jacobian depends only on `Θ̂` and its sign pattern.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::glasso::PrecisionEstimate;
use crate::linalg::{
    cholesky, kron_restricted, logdet, spd_inverse, unvec_index, vec_index, SupportSet, SymmetricMatrix,
    SymmetricSolver,
};

/// Settings for the support test and the restricted solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffConfig {
    /// Relative distance of `|Ẑ_ij|` to `γ Λ_ij` under which an entry is degenerate.
    pub boundary_tol: f64,
    /// Largest support size for which the dense restricted system is built.
    pub support_cap: usize,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            boundary_tol: 1e-6,
            support_cap: 20_000,
        }
    }
}

/// `Ẑ = Θ̂ - γ (S - Θ̂^{-1})`.
pub fn prox_argument(est: &PrecisionEstimate, s: &SymmetricMatrix, gamma: f64) -> Result<SymmetricMatrix> {
    let inv = est.inverse()?;
    Ok(est.theta.sub(&s.sub(&inv).scale(gamma)))
}

/// Support of `Θ̂`, checked against the soft-thresholding boundary.
///
/// Raises `DegenerateSupport` when some `|Ẑ_ij|` is within
/// `boundary_tol * γ Λ_ij` of the threshold `γ Λ_ij`, or when the test
/// `|Ẑ_ij| > γ Λ_ij` disagrees with the nonzero pattern of `Θ̂`.
pub fn support_from_estimate(est: &PrecisionEstimate, s: &SymmetricMatrix, cfg: &DiffConfig) -> Result<SupportSet> {
    support_with_gamma(est, s, est.gamma, cfg)
}

/// [`support_from_estimate`] with `Ẑ` built from an arbitrary step.
pub fn support_with_gamma(
    est: &PrecisionEstimate,
    s: &SymmetricMatrix,
    gamma: f64,
    cfg: &DiffConfig,
) -> Result<SupportSet> {
    let z = prox_argument(est, s, gamma)?;
    let p = est.dim();
    for j in 0..p {
        for i in 0..=j {
            let threshold = gamma * est.reg.weight(i, j);
            let z_abs = z.get(i, j).abs();
            let near = threshold > 0.0 && (threshold - z_abs).abs() < cfg.boundary_tol * threshold;
            let active = z_abs > threshold;
            let nonzero = est.support.contains(vec_index(i, j, p));
            if near || active != nonzero {
                return Err(Error::DegenerateSupport {
                    row: i,
                    col: j,
                    z_abs,
                    threshold,
                });
            }
        }
    }
    Ok(est.support.clone())
}

/// `∂Θ̂_ij / ∂λ` as a `p x p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarJacobian {
    pub values: Array2<f64>,
}

impl ScalarJacobian {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

fn restricted_solver(inv: &SymmetricMatrix, support: &SupportSet, cfg: &DiffConfig) -> Result<SymmetricSolver> {
    if support.len() > cfg.support_cap {
        return Err(Error::ResourceLimit {
            size: support.len(),
            cap: cfg.support_cap,
        });
    }
    let k = kron_restricted(inv, inv, support);
    SymmetricSolver::new(k.view())
}

/// Support entries grouped into `{(i,j), (j,i)}` pairs, as positions in the support.
fn support_orbits(support: &SupportSet, p: usize) -> Option<Vec<(usize, Option<usize>)>> {
    let mut orbits = Vec::with_capacity(support.len() / 2 + p);
    for (a, &k) in support.indices().iter().enumerate() {
        let (i, j) = unvec_index(k, p);
        if i == j {
            orbits.push((a, None));
        } else if i < j {
            orbits.push((a, Some(support.position(vec_index(j, i, p))?)));
        } else if !support.contains(vec_index(j, i, p)) {
            return None;
        }
    }
    Some(orbits)
}

/// Solves the restricted system for a right-hand side that is the vec of a
/// symmetric matrix.
///
/// The solution is then symmetric too, so with `P` the map from the
/// upper-triangle unknowns to the support, `Pᵀ K P u = Pᵀ b` is solved
/// instead; it is SPD and about half the size.
fn solve_symmetric_rhs(inv: &SymmetricMatrix, support: &SupportSet, cfg: &DiffConfig, rhs: &[f64]) -> Result<Vec<f64>> {
    let p = inv.dim();
    let Some(orbits) = support_orbits(support, p) else {
        return restricted_solver(inv, support, cfg)?.solve(rhs);
    };
    if support.len() > cfg.support_cap {
        return Err(Error::ResourceLimit {
            size: support.len(),
            cap: cfg.support_cap,
        });
    }
    let idx = support.indices();
    let w = inv.as_array();
    let members = |o: &(usize, Option<usize>)| [Some(o.0), o.1].into_iter().flatten();
    let n = orbits.len();
    let mut folded = Array2::zeros((n, n));
    for (a, oa) in orbits.iter().enumerate() {
        for (b, ob) in orbits.iter().enumerate().skip(a) {
            let mut v = 0.0;
            for r in members(oa) {
                let r = idx[r];
                for c in members(ob) {
                    let c = idx[c];
                    v += w[[r / p, c / p]] * w[[r % p, c % p]];
                }
            }
            folded[[a, b]] = v;
            folded[[b, a]] = v;
        }
    }
    let b: Vec<f64> = orbits.iter().map(|o| members(o).map(|r| rhs[r]).sum()).collect();
    let u = SymmetricSolver::new(folded.view())?.solve(&b)?;
    let mut out = vec![0.0; support.len()];
    for (o, &ua) in orbits.iter().zip(&u) {
        for r in members(o) {
            out[r] = ua;
        }
    }
    Ok(out)
}

fn check_support(est: &PrecisionEstimate, support: &SupportSet) -> Result<()> {
    let p = est.dim();
    if support.dim2() != p * p {
        return Err(Error::DimensionMismatch {
            expected: p * p,
            got: support.dim2(),
        });
    }
    Ok(())
}

/// `vec(E)[𝒮] / γ = -sign(vec Θ̂)[𝒮]`; on the support `sign(Ẑ) = sign(Θ̂)`.
fn scalar_rhs(theta: &SymmetricMatrix, support: &SupportSet) -> Vec<f64> {
    let p = theta.dim();
    support
        .indices()
        .iter()
        .map(|&k| {
            let (i, j) = unvec_index(k, p);
            -theta.get(i, j).signum()
        })
        .collect()
}

fn scatter(values: &[f64], support: &SupportSet, p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((p, p));
    for (&k, &v) in support.indices().iter().zip(values) {
        let (i, j) = unvec_index(k, p);
        out[[i, j]] = v;
    }
    out
}

/// Jacobian of `λ ↦ Θ̂(λ)` from one restricted Kronecker solve.
pub fn jacobian_scalar(est: &PrecisionEstimate, support: &SupportSet, cfg: &DiffConfig) -> Result<ScalarJacobian> {
    check_support(est, support)?;
    let p = est.dim();
    let inv = est.inverse()?;
    let y = solve_symmetric_rhs(&inv, support, cfg, &scalar_rhs(&est.theta, support))?;
    Ok(ScalarJacobian {
        values: scatter(&y, support, p),
    })
}

/// `dL/dλ = <J, ∇C>`.
pub fn hypergradient_scalar(jac: &ScalarJacobian, grad_c: &SymmetricMatrix) -> f64 {
    assert_eq!(jac.dim(), grad_c.dim(), "dimension mismatch");
    jac.values
        .iter()
        .zip(grad_c.as_array().iter())
        .map(|(a, b)| a * b)
        .sum()
}

/// `[∇L(Λ)]_kl = Σ_ij ∂C/∂Θ_ij ∂Θ̂_ij/∂Λ_kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedHypergradient {
    pub values: Array2<f64>,
    /// `[(Θ̂^{-1} ⊗ Θ̂^{-1})[𝒮, 𝒮]]^{-1} vec(∇C)[𝒮]`.
    pub y: Vec<f64>,
}

impl WeightedHypergradient {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Sup norm of the entries.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(G + G^T) / 2`.
    pub fn symmetrized(&self) -> SymmetricMatrix {
        SymmetricMatrix::symmetrize(self.values.view()).expect("square by construction")
    }
}

/// How the per-entry Jacobians are contracted against `∇C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionPath {
    /// One solve with `vec(∇C)[𝒮]` as right-hand side (the restricted block is symmetric).
    Adjoint,
    /// Invert the restricted block and read one column per support entry.
    ColumnExtraction,
}

/// Hypergradient with respect to every entry of `Λ`.
pub fn hypergradient_weighted(
    est: &PrecisionEstimate,
    support: &SupportSet,
    grad_c: &SymmetricMatrix,
    cfg: &DiffConfig,
) -> Result<WeightedHypergradient> {
    hypergradient_weighted_with(est, support, grad_c, cfg, ContractionPath::Adjoint)
}

pub fn hypergradient_weighted_with(
    est: &PrecisionEstimate,
    support: &SupportSet,
    grad_c: &SymmetricMatrix,
    cfg: &DiffConfig,
    path: ContractionPath,
) -> Result<WeightedHypergradient> {
    check_support(est, support)?;
    let p = est.dim();
    if grad_c.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: grad_c.dim(),
        });
    }
    let inv = est.inverse()?;
    let g_s: Vec<f64> = support
        .indices()
        .iter()
        .map(|&k| {
            let (i, j) = unvec_index(k, p);
            grad_c.get(i, j)
        })
        .collect();
    let sign_at = |k: usize| {
        let (i, j) = unvec_index(k, p);
        est.theta.get(i, j).signum()
    };

    match path {
        ContractionPath::Adjoint => {
            let y = solve_symmetric_rhs(&inv, support, cfg, &g_s)?;
            let entries: Vec<f64> = support
                .indices()
                .iter()
                .zip(&y)
                .map(|(&k, &yk)| -sign_at(k) * yk)
                .collect();
            Ok(WeightedHypergradient {
                values: scatter(&entries, support, p),
                y,
            })
        }
        ContractionPath::ColumnExtraction => {
            let n = support.len();
            let solver = restricted_solver(&inv, support, cfg)?;
            let kinv = solver.solve_many(Array2::<f64>::eye(n).view())?;
            let mut entries = Vec::with_capacity(n);
            for (b, &k) in support.indices().iter().enumerate() {
                // vec(J_(Λ_kl))[𝒮] = -sign(Θ̂_kl) * column b of the inverse
                let s = -sign_at(k);
                let dot: f64 = (0..n).map(|a| s * kinv[[a, b]] * g_s[a]).sum();
                entries.push(dot);
            }
            let y = (0..n).map(|a| (0..n).map(|b| kinv[[a, b]] * g_s[b]).sum()).collect();
            Ok(WeightedHypergradient {
                values: scatter(&entries, support, p),
                y,
            })
        }
    }
}

/// Jacobian `∂Θ̂ / ∂Λ_kl` for a single support entry `(k, l)`, by column extraction.
pub fn jacobian_entry(
    est: &PrecisionEstimate,
    support: &SupportSet,
    k: usize,
    l: usize,
    cfg: &DiffConfig,
) -> Result<Array2<f64>> {
    check_support(est, support)?;
    let p = est.dim();
    let mut out = Array2::zeros((p, p));
    let Some(b) = support.position(vec_index(k, l, p)) else {
        return Ok(out);
    };
    let inv = est.inverse()?;
    let solver = restricted_solver(&inv, support, cfg)?;
    let mut e = vec![0.0; support.len()];
    e[b] = -est.theta.get(k, l).signum();
    let col = solver.solve(&e)?;
    out = scatter(&col, support, p);
    Ok(out)
}

/// Hold-out criterion value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    pub gradient: SymmetricMatrix,
}

/// `C(Θ) = -log det Θ + <S_test, Θ>` and `∇C(Θ) = S_test - Θ^{-1}`.
pub fn criterion_holdout(theta: &SymmetricMatrix, cov_test: &SymmetricMatrix) -> Result<CriterionValue> {
    if theta.dim() != cov_test.dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.dim(),
            got: cov_test.dim(),
        });
    }
    let f = cholesky(theta)?;
    let value = -logdet(&f) + cov_test.frobenius_dot(theta);
    let gradient = cov_test.sub(&spd_inverse(&f));
    Ok(CriterionValue { value, gradient })
}

/// `‖Θ_true - Θ̂‖_F / ‖Θ_true‖_F`.
pub fn relative_error(theta_hat: &SymmetricMatrix, theta_true: &SymmetricMatrix) -> f64 {
    theta_true.sub(theta_hat).frobenius_norm() / theta_true.frobenius_norm()
}

/// Contraction `Σ_ij A_ij B_ij` of two general matrices.
pub fn frobenius(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
