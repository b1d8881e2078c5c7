#![allow(dead_code)]

use glasso_tune::data_gen::{synthetic_problem, Dataset, GroundTruth};
use glasso_tune::glasso::{check_nondegeneracy, solve, PrecisionEstimate, Regularization, SolverConfig};
use glasso_tune::implicit_diff::criterion_holdout;
use glasso_tune::linalg::{vec_index, SupportSet, SymmetricMatrix};
use ndarray::Array2;

pub fn tight() -> SolverConfig {
    SolverConfig::default().with_tol(1e-11)
}

/// Small instance with a fairly dense truth so that supports are nontrivial.
pub fn small_instance(p: usize, seed: u64) -> (GroundTruth, Dataset) {
    synthetic_problem(p, 20 * p, 0.5, 0.5, seed).unwrap()
}

/// Whether `est` is safely away from any support change.
pub fn well_separated(est: &PrecisionEstimate, s: &SymmetricMatrix, slack: f64) -> bool {
    let nd = check_nondegeneracy(est, s, slack).unwrap();
    let p = est.dim();
    let min_on = est
        .support
        .indices()
        .iter()
        .map(|&k| est.theta.as_array()[[k % p, k / p]].abs())
        .fold(f64::INFINITY, f64::min);
    nd.holds && min_on > slack
}

/// Central differences of `λ ↦ Θ̂(λ)`, warm-started at `center`.
pub fn fd_scalar_jacobian(s: &SymmetricMatrix, lambda: f64, h: f64, center: &SymmetricMatrix) -> Array2<f64> {
    let plus = solve(s, &Regularization::Scalar(lambda + h), &tight(), Some(center)).unwrap();
    let minus = solve(s, &Regularization::Scalar(lambda - h), &tight(), Some(center)).unwrap();
    (plus.theta.as_array() - minus.theta.as_array()) / (2.0 * h)
}

/// Central difference of `C(Θ̂(Λ))` in the single entry `Λ_kl`.
///
/// The penalty `Σ_ij Λ_ij |Θ_ij|` sees `Λ_kl` and `Λ_lk` only through
/// their sum, so moving `Λ_kl` alone by `h` equals moving both by `h / 2`.
pub fn fd_weighted_entry(
    s: &SymmetricMatrix,
    s_test: &SymmetricMatrix,
    weights: &SymmetricMatrix,
    k: usize,
    l: usize,
    h: f64,
    center: &SymmetricMatrix,
) -> f64 {
    let shift = if k == l { h } else { h / 2.0 };
    let eval = |sign: f64| {
        let mut w = weights.clone();
        w.set(k, l, weights.get(k, l) + sign * shift);
        let est = solve(s, &Regularization::Matrix(w), &tight(), Some(center)).unwrap();
        criterion_holdout(&est.theta, s_test).unwrap().value
    };
    (eval(1.0) - eval(-1.0)) / (2.0 * h)
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs()))
            .unwrap();
        assert!(a[[piv, c]].abs() > 1e-300, "singular oracle system");
        if piv != c {
            for j in 0..n {
                a.swap([c, j], [piv, j]);
            }
            b.swap(c, piv);
        }
        for r in c + 1..n {
            let f = a[[r, c]] / a[[c, c]];
            if f != 0.0 {
                for j in c..n {
                    a[[r, j]] -= f * a[[c, j]];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[[r, j]] * x[j]).sum();
        x[r] = (b[r] - s) / a[[r, r]];
    }
    x
}

/// Jacobian of the fixed point `Θ = ST(Θ - γ (S - Θ^{-1}), γ λ)` in `λ`,
/// from the full `p² x p²` linearization with the step `γ` kept explicit:
/// `(I - D (I - γ W⊗W)) vec J = -γ D vec(sign Θ)` with `D` the support mask.
pub fn dense_fixed_point_jacobian(theta: &SymmetricMatrix, support: &SupportSet, gamma: f64) -> Array2<f64> {
    let p = theta.dim();
    let n = p * p;
    let w = glasso_tune::linalg::spd_inverse(&glasso_tune::linalg::cholesky(theta).unwrap());
    let w = w.as_array();
    let mut m = Array2::<f64>::eye(n);
    let mut rhs = vec![0.0; n];
    for r in 0..n {
        if !support.contains(r) {
            continue;
        }
        let (ri, rj) = (r % p, r / p);
        for c in 0..n {
            let (ci, cj) = (c % p, c / p);
            let kron = w[[rj, cj]] * w[[ri, ci]];
            let ident = if r == c { 1.0 } else { 0.0 };
            m[[r, c]] = ident - (ident - gamma * kron);
        }
        rhs[r] = -gamma * theta.get(ri, rj).signum();
    }
    let x = dense_solve(m, rhs);
    Array2::from_shape_fn((p, p), |(i, j)| x[vec_index(i, j, p)])
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
