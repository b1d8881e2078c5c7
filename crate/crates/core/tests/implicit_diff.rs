mod common;

use common::*;
use glasso_tune::bilevel::lambda_init;
use glasso_tune::glasso::{solve, Regularization, SolverConfig};
use glasso_tune::implicit_diff::{
    criterion_holdout, hypergradient_scalar, hypergradient_weighted, jacobian_entry, jacobian_scalar,
    support_from_estimate, DiffConfig,
};
use glasso_tune::linalg::SymmetricMatrix;
use glasso_tune::Error;

#[test]
fn restricted_solve_matches_full_linearization() {
    let cfg = DiffConfig::default();
    for (p, seed) in [(3, 1), (4, 2), (6, 3), (6, 4)] {
        let (_, data) = small_instance(p, seed);
        let s = &data.cov_train;
        let lam = 0.3 * lambda_init(s).unwrap();
        let est = solve(s, &Regularization::Scalar(lam), &tight(), None).unwrap();
        let support = support_from_estimate(&est, s, &cfg).unwrap();
        let jac = jacobian_scalar(&est, &support, &cfg).unwrap();
        let oracle = dense_fixed_point_jacobian(&est.theta, &support, 1.0);
        let err = max_abs_diff(&jac.values, &oracle);
        assert!(err <= 1e-10 * max_abs(&oracle).max(1.0), "p = {p}: {err:e}");
    }
}

#[test]
fn diagonal_regime_has_closed_form_jacobian() {
    // Θ̂_ii = 1 / (S_ii + λ), so dΘ̂_ii/dλ = -Θ̂_ii²
    let cfg = DiffConfig::default();
    let (_, data) = small_instance(5, 9);
    let s = &data.cov_train;
    let lam = 1.5 * lambda_init(s).unwrap();
    let est = solve(s, &Regularization::Scalar(lam), &SolverConfig::default(), None).unwrap();
    let support = support_from_estimate(&est, s, &cfg).unwrap();
    assert_eq!(support.len(), 5);
    let jac = jacobian_scalar(&est, &support, &cfg).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let expected = if i == j {
                -(1.0 / (s.get(i, i) + lam)).powi(2)
            } else {
                0.0
            };
            assert!((jac.values[[i, j]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn jacobian_signs_oppose_estimate_on_diagonal() {
    // more penalty shrinks every diagonal entry
    let cfg = DiffConfig::default();
    for seed in 0..5 {
        let (_, data) = small_instance(6, seed);
        let s = &data.cov_train;
        let lam = 0.4 * lambda_init(s).unwrap();
        let est = solve(s, &Regularization::Scalar(lam), &tight(), None).unwrap();
        let support = support_from_estimate(&est, s, &cfg).unwrap();
        let jac = jacobian_scalar(&est, &support, &cfg).unwrap();
        for i in 0..6 {
            assert!(jac.values[[i, i]] < 0.0, "seed {seed}, entry {i}");
        }
    }
}

#[test]
fn matrix_partials_sum_to_scalar_derivative() {
    let cfg = DiffConfig::default();
    for (p, seed) in [(4, 0), (7, 1), (10, 2)] {
        let (_, data) = small_instance(p, seed);
        let lam = 0.3 * lambda_init(&data.cov_train).unwrap();
        let scalar = solve(&data.cov_train, &Regularization::Scalar(lam), &tight(), None).unwrap();
        let weights = SymmetricMatrix::constant(p, lam);
        let matrix = solve(&data.cov_train, &Regularization::Matrix(weights), &tight(), None).unwrap();
        let crit = criterion_holdout(&scalar.theta, &data.cov_test).unwrap();
        let support = support_from_estimate(&scalar, &data.cov_train, &cfg).unwrap();
        let d_lambda = hypergradient_scalar(&jacobian_scalar(&scalar, &support, &cfg).unwrap(), &crit.gradient);
        let g = hypergradient_weighted(&matrix, &support, &crit.gradient, &cfg).unwrap();
        let total: f64 = g.values.sum();
        assert!(
            (total - d_lambda).abs() <= 1e-8 * d_lambda.abs().max(1.0),
            "{total} vs {d_lambda}"
        );
    }
}

#[test]
fn entry_jacobians_contract_to_weighted_gradient() {
    let cfg = DiffConfig::default();
    let (_, data) = small_instance(4, 5);
    let lam = 0.3 * lambda_init(&data.cov_train).unwrap();
    let est = solve(&data.cov_train, &Regularization::Scalar(lam), &tight(), None).unwrap();
    let support = support_from_estimate(&est, &data.cov_train, &cfg).unwrap();
    let crit = criterion_holdout(&est.theta, &data.cov_test).unwrap();
    let g = hypergradient_weighted(&est, &support, &crit.gradient, &cfg).unwrap();
    for k in 0..4 {
        for l in 0..4 {
            let j = jacobian_entry(&est, &support, k, l, &cfg).unwrap();
            let v: f64 = (&j * crit.gradient.as_array()).sum();
            assert!((v - g.values[[k, l]]).abs() < 1e-12, "({k}, {l})");
        }
    }
}

#[test]
fn off_support_gradient_is_exactly_zero() {
    let cfg = DiffConfig::default();
    for seed in 0..5 {
        let (_, data) = small_instance(8, seed);
        let lam = 0.5 * lambda_init(&data.cov_train).unwrap();
        let est = solve(&data.cov_train, &Regularization::Scalar(lam), &tight(), None).unwrap();
        let support = support_from_estimate(&est, &data.cov_train, &cfg).unwrap();
        let crit = criterion_holdout(&est.theta, &data.cov_test).unwrap();
        let g = hypergradient_weighted(&est, &support, &crit.gradient, &cfg).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if est.theta.get(i, j) == 0.0 {
                    assert_eq!(g.values[[i, j]], 0.0);
                }
            }
        }
    }
}

#[test]
fn support_cap_is_a_resource_limit() {
    let cfg = DiffConfig {
        support_cap: 3,
        ..DiffConfig::default()
    };
    let (_, data) = small_instance(5, 0);
    let lam = 0.2 * lambda_init(&data.cov_train).unwrap();
    let est = solve(&data.cov_train, &Regularization::Scalar(lam), &tight(), None).unwrap();
    let support = support_from_estimate(&est, &data.cov_train, &cfg).unwrap();
    let err = jacobian_scalar(&est, &support, &cfg).unwrap_err();
    assert!(matches!(err, Error::ResourceLimit { cap: 3, .. }), "{err}");
}
