//! Synthetic ground truth, Gaussian sampling and train/test splits.
//!
//! All randomness comes from [`ChaCha8Rng`] seeded with a `u64`; uniform
//! variates are drawn as `rng.gen::<f64>()` and Gaussians via Box–Muller on
//! that stream, so outputs are reproducible across platforms.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, SymmetricMatrix};

/// Entries of the ground truth with absolute value at most this are zeros.
pub const SPARSITY_THRESHOLD: f64 = 1e-12;

/// Sparse SPD precision matrix with its off-diagonal support.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta_true: SymmetricMatrix,
    /// `mask[i][j]` for `i != j` is true where `|theta_true[i][j]| > 1e-12`.
    pub mask: Array2<bool>,
}

impl GroundTruth {
    pub fn from_precision(theta_true: SymmetricMatrix) -> Result<Self> {
        cholesky(&theta_true)?;
        let p = theta_true.dim();
        let mask = Array2::from_shape_fn((p, p), |(i, j)| {
            i != j && theta_true.get(i, j).abs() > SPARSITY_THRESHOLD
        });
        Ok(Self { theta_true, mask })
    }

    pub fn dim(&self) -> usize {
        self.theta_true.dim()
    }
}

/// Random sparse SPD matrix `L L^T` with a sparse lower-triangular `L`.
///
/// Diagonal of `L` is uniform in `[1, 2]`; each strictly-lower entry is
/// nonzero with probability `density`, uniform in `[-1, 1]` scaled by
/// `0.9 / sqrt(p * density)`.
pub fn make_sparse_spd(p: usize, density: f64, seed: u64) -> Result<GroundTruth> {
    let (l, _) = sparse_cholesky_factor(p, density, seed)?;
    let theta = l.dot(&l.t());
    GroundTruth::from_precision(SymmetricMatrix::symmetrize(theta.view())?)
}

/// The factor drawn by [`make_sparse_spd`] and its strictly-lower fill count.
pub fn sparse_cholesky_factor(p: usize, density: f64, seed: u64) -> Result<(Array2<f64>, usize)> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!("dimension must be >= 2, got {p}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.9 / (p as f64 * density).sqrt();
    let mut l = Array2::zeros((p, p));
    let mut fill = 0;
    for i in 0..p {
        l[[i, i]] = 1.0 + rng.gen::<f64>();
        for j in 0..i {
            let keep = rng.gen::<f64>() < density;
            let value = 2.0 * rng.gen::<f64>() - 1.0;
            if keep && value != 0.0 {
                l[[i, j]] = scale * value;
                fill += 1;
            }
        }
    }
    Ok((l, fill))
}

/// Standard normal draws by Box–Muller.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// `n` i.i.d. draws from `N(0, theta_true^{-1})` as rows of an `n x p` matrix.
///
/// Each row is `x = L^{-T} z` with `theta_true = L L^T` and `z` standard normal.
pub fn sample_gaussian(truth: &GroundTruth, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let p = truth.dim();
    let factor = cholesky(&truth.theta_true)?;
    let mut gauss = GaussianStream::new(seed);
    let mut out = Array2::zeros((n, p));
    let mut z = vec![0.0; p];
    for r in 0..n {
        for v in z.iter_mut() {
            *v = gauss.next_standard();
        }
        let x = factor.solve_upper_transposed(&z);
        for (c, v) in x.into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

/// `(1/m) Σ x x^T` over the given rows (no centering).
pub fn empirical_covariance(samples: ArrayView2<f64>, rows: &[usize]) -> Result<SymmetricMatrix> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("covariance needs at least one sample".into()));
    }
    let p = samples.ncols();
    if p == 0 {
        return Err(Error::InvalidArgument("samples have zero columns".into()));
    }
    let m = rows.len() as f64;
    Ok(SymmetricMatrix::from_lower_fn(p, |i, j| {
        rows.iter().map(|&r| samples[[r, i]] * samples[[r, j]]).sum::<f64>() / m
    }))
}

/// Covariance of all rows.
pub fn empirical_covariance_all(samples: ArrayView2<f64>) -> Result<SymmetricMatrix> {
    let rows: Vec<usize> = (0..samples.nrows()).collect();
    empirical_covariance(samples, &rows)
}

/// Samples with a train/test partition and the covariance of each side.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f64>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub cov_train: SymmetricMatrix,
    pub cov_test: SymmetricMatrix,
}

impl Dataset {
    pub fn p(&self) -> usize {
        self.samples.ncols()
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }
}

/// Random permutation split; the first `floor(n * ratio)` permuted rows train.
pub fn split(samples: Array2<f64>, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = samples.nrows();
    let n_train = (n as f64 * ratio).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::DegenerateSplit { n, n_train });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_indices = perm[..n_train].to_vec();
    let mut test_indices = perm[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    let cov_train = empirical_covariance(samples.view(), &train_indices)?;
    let cov_test = empirical_covariance(samples.view(), &test_indices)?;
    Ok(Dataset {
        samples,
        train_indices,
        test_indices,
        cov_train,
        cov_test,
    })
}

/// Ground truth plus a split sample, drawn with sub-seeds `seed`, `seed + 1`
/// and `seed + 2` for the matrix, the samples and the split.
pub fn synthetic_problem(
    p: usize,
    n: usize,
    density: f64,
    split_ratio: f64,
    seed: u64,
) -> Result<(GroundTruth, Dataset)> {
    let truth = make_sparse_spd(p, density, seed)?;
    let samples = sample_gaussian(&truth, n, seed.wrapping_add(1))?;
    let data = split(samples, split_ratio, seed.wrapping_add(2))?;
    Ok((truth, data))
}
