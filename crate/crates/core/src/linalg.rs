//! Dense symmetric linear algebra.
//!
//! Vectorization is column-major throughout the crate: entry `(i, j)` of a
//! `p x p` matrix lives at position `i + j * p` of its vectorization, and the
//! inverse map is `k -> (k % p, k / p)`. This is the convention under which
//! `vec(A C B^T) = (B ⊗ A) vec(C)`; for the symmetric operands used here the
//! order of the Kronecker factors does not matter.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a system is declared singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-12;

/// Column-major position of entry `(i, j)` in a `p x p` matrix.
#[inline]
pub fn vec_index(i: usize, j: usize, p: usize) -> usize {
    i + j * p
}

/// Inverse of [`vec_index`].
#[inline]
pub fn unvec_index(k: usize, p: usize) -> (usize, usize) {
    (k % p, k / p)
}

/// Dense `p x p` real symmetric matrix.
///
/// Every constructor either checks or enforces exact symmetry, so
/// `get(i, j) == get(j, i)` bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    data: Array2<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(p: usize) -> Self {
        assert!(p >= 1, "dimension must be positive");
        Self {
            data: Array2::zeros((p, p)),
        }
    }

    pub fn identity(p: usize) -> Self {
        assert!(p >= 1, "dimension must be positive");
        Self { data: Array2::eye(p) }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "dimension must be positive");
        Self {
            data: Array2::from_diag(&Array1::from(diag.to_vec())),
        }
    }

    /// Constant matrix with every entry equal to `value`.
    pub fn constant(p: usize, value: f64) -> Self {
        assert!(p >= 1, "dimension must be positive");
        Self {
            data: Array2::from_elem((p, p), value),
        }
    }

    /// Builds from the lower triangle produced by `f(i, j)` with `i >= j`.
    pub fn from_lower_fn(p: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(p >= 1, "dimension must be positive");
        let mut data = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..=i {
                let v = f(i, j);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        Self { data }
    }

    /// Takes `(A + A^T) / 2`.
    pub fn symmetrize(a: ArrayView2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c || r == 0 {
            return Err(Error::DimensionMismatch {
                expected: r.max(1),
                got: c,
            });
        }
        Ok(Self::from_lower_fn(r, |i, j| {
            if i == j {
                a[[i, i]]
            } else {
                0.5 * (a[[i, j]] + a[[j, i]])
            }
        }))
    }

    /// Accepts `a` only if it is square and exactly symmetric.
    pub fn try_from_array(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c || r == 0 {
            return Err(Error::DimensionMismatch {
                expected: r.max(1),
                got: c,
            });
        }
        for i in 0..r {
            for j in 0..i {
                if a[[i, j]] != a[[j, i]] {
                    return Err(Error::InvalidArgument(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { data: a })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    /// Writes `value` at `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[[i, j]] = value;
        self.data[[j, i]] = value;
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        self.data.diag().to_vec()
    }

    /// Applies `f` entrywise; `f` must not depend on position asymmetrically.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// Entrywise combination of two matrices of equal dimension.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        let mut data = self.data.clone();
        ndarray::Zip::from(&mut data)
            .and(&other.data)
            .for_each(|a, &b| *a = f(*a, b));
        Self { data }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| s * x)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    /// Frobenius inner product `<A, B>`.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_dot(self).sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute off-diagonal entry (0 for `p = 1`).
    pub fn max_abs_off_diagonal(&self) -> f64 {
        let p = self.dim();
        let mut m = 0.0_f64;
        for i in 0..p {
            for j in 0..i {
                m = m.max(self.data[[i, j]].abs());
            }
        }
        m
    }

    /// Dense matrix product (the result is generally not symmetric).
    pub fn matmul(&self, other: &Self) -> Array2<f64> {
        self.data.dot(&other.data)
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        self.max_abs_off_diagonal() <= tol
    }
}

/// Column-major vectorization of a square matrix.
pub fn vec(a: &SymmetricMatrix) -> Vec<f64> {
    vec_general(a.view())
}

/// Column-major vectorization of any square matrix.
pub fn vec_general(a: ArrayView2<f64>) -> Vec<f64> {
    let (r, c) = a.dim();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a[[i, j]]);
        }
    }
    out
}

/// Inverse of [`vec_general`] for a `p x p` matrix.
pub fn unvec(v: &[f64], p: usize) -> Result<Array2<f64>> {
    if v.len() != p * p {
        return Err(Error::DimensionMismatch {
            expected: p * p,
            got: v.len(),
        });
    }
    Ok(Array2::from_shape_fn((p, p), |(i, j)| v[vec_index(i, j, p)]))
}

/// Lower Cholesky factor `L` of an SPD matrix, `A = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.lower.dot(&self.lower.t())
    }

    /// Solves `L^T x = z` by back substitution.
    pub fn solve_upper_transposed(&self, z: &[f64]) -> Vec<f64> {
        let p = self.dim();
        assert_eq!(z.len(), p, "dimension mismatch");
        let l = &self.lower;
        let mut x = z.to_vec();
        for i in (0..p).rev() {
            let mut s = x[i];
            for k in i + 1..p {
                s -= l[[k, i]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
        x
    }
}

/// Cholesky factorization; fails on the first pivot that is not strictly positive.
pub fn cholesky(a: &SymmetricMatrix) -> Result<CholeskyFactor> {
    let p = a.dim();
    let mut buf: Vec<f64> = a.as_array().iter().copied().collect();
    cholesky_in_place(&mut buf, p, 0.0).map_err(|(index, pivot)| Error::NotPositiveDefinite { index, pivot })?;
    let lower = Array2::from_shape_fn((p, p), |(i, j)| if j <= i { buf[i * p + j] } else { 0.0 });
    Ok(CholeskyFactor { lower })
}

/// `log det A = 2 Σ log L_ii`.
pub fn logdet(f: &CholeskyFactor) -> f64 {
    2.0 * f.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// `A^{-1} = L^{-T} L^{-1}`.
pub fn spd_inverse(f: &CholeskyFactor) -> SymmetricMatrix {
    let p = f.dim();
    let l = &f.lower;
    // inverse of the lower factor, column by column
    let mut linv = Array2::<f64>::zeros((p, p));
    for j in 0..p {
        linv[[j, j]] = 1.0 / l[[j, j]];
        for i in j + 1..p {
            let mut s = 0.0;
            for k in j..i {
                s -= l[[i, k]] * linv[[k, j]];
            }
            linv[[i, j]] = s / l[[i, i]];
        }
    }
    SymmetricMatrix::from_lower_fn(p, |i, j| {
        // i >= j
        let mut s = 0.0;
        for k in i..p {
            s += linv[[k, i]] * linv[[k, j]];
        }
        s
    })
}

/// Entries `(A ⊗ B)[S, S]` computed by index arithmetic.
pub fn kron_restricted(a: &SymmetricMatrix, b: &SymmetricMatrix, support: &SupportSet) -> Array2<f64> {
    let p = a.dim();
    assert_eq!(b.dim(), p, "dimension mismatch");
    assert_eq!(support.dim2(), p * p, "support does not match dimension");
    let idx = support.indices();
    let s = idx.len();
    let (av, bv) = (a.as_array(), b.as_array());
    let mut out = Array2::zeros((s, s));
    for (ra, &r) in idx.iter().enumerate() {
        let (ri, rj) = (r / p, r % p);
        for (cb, &c) in idx.iter().enumerate() {
            out[[ra, cb]] = av[[ri, c / p]] * bv[[rj, c % p]];
        }
    }
    out
}

/// Ordered subset of `[0, p^2)` indexing entries of a vectorized `p x p` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    indices: Vec<usize>,
    mask: Vec<bool>,
}

impl SupportSet {
    /// Builds from any collection of indices; duplicates are merged.
    pub fn new(dim2: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = vec![false; dim2];
        for k in indices {
            if k >= dim2 {
                return Err(Error::InvalidArgument(format!(
                    "support index {k} out of range for length {dim2}"
                )));
            }
            mask[k] = true;
        }
        Ok(Self::from_mask(mask))
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let indices = mask.iter().enumerate().filter_map(|(k, &m)| m.then_some(k)).collect();
        Self { indices, mask }
    }

    pub fn full(dim2: usize) -> Self {
        Self::from_mask(vec![true; dim2])
    }

    /// Length of the ambient vector, `p^2`.
    pub fn dim2(&self) -> usize {
        self.mask.len()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    #[inline]
    pub fn contains(&self, k: usize) -> bool {
        self.mask.get(k).copied().unwrap_or(false)
    }

    /// Rank of `k` within the support.
    pub fn position(&self, k: usize) -> Option<usize> {
        if self.contains(k) {
            self.indices.binary_search(&k).ok()
        } else {
            None
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0_f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Row-major in-place Cholesky on the lower triangle of `a` (`n x n`).
/// Fails with `(index, pivot)` when a pivot is `<= threshold` or not finite.
fn cholesky_in_place(a: &mut [f64], n: usize, threshold: f64) -> std::result::Result<(), (usize, f64)> {
    for i in 0..n {
        let (done, rest) = a.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let row_j = &done[j * n..j * n + j + 1];
            let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
            row_i[j] = s / row_j[j];
        }
        let d = row_i[i] - dot(&row_i[..i], &row_i[..i]);
        if !(d > threshold) || !d.is_finite() {
            return Err((i, d));
        }
        row_i[i] = d.sqrt();
        for v in row_i[i + 1..].iter_mut() {
            *v = 0.0;
        }
    }
    Ok(())
}

enum Factorization {
    /// Row-major lower factor.
    Cholesky(Vec<f64>),
    /// Row-major packed `LU` with row permutation.
    Lu { lu: Vec<f64>, perm: Vec<usize> },
}

/// Factorization of a dense symmetric system, reusable across right-hand sides.
///
/// Tries Cholesky first and falls back to LU with partial pivoting when a
/// Cholesky pivot drops under `1e-12 * max|diag|`.
pub struct SymmetricSolver {
    n: usize,
    fact: Factorization,
}

impl SymmetricSolver {
    pub fn new(m: ArrayView2<f64>) -> Result<Self> {
        let (n, c) = m.dim();
        if n != c {
            return Err(Error::DimensionMismatch { expected: n, got: c });
        }
        let buf: Vec<f64> = m.iter().copied().collect();
        let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(buf[i * n + i].abs()));
        let threshold = SINGULAR_PIVOT_RTOL * max_diag;
        if n == 0 {
            return Ok(Self {
                n,
                fact: Factorization::Cholesky(buf),
            });
        }
        if max_diag == 0.0 {
            return Err(Error::SingularSystem { index: 0, pivot: 0.0 });
        }
        let mut chol = buf.clone();
        match cholesky_in_place(&mut chol, n, threshold) {
            Ok(()) => Ok(Self {
                n,
                fact: Factorization::Cholesky(chol),
            }),
            Err((index, pivot)) => {
                log::debug!("cholesky pivot {pivot:.3e} at {index}; falling back to LU");
                let (lu, perm) = lu_in_place(buf, n, threshold)?;
                Ok(Self {
                    n,
                    fact: Factorization::Lu { lu, perm },
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.fact, Factorization::Cholesky(_))
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if rhs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        match &self.fact {
            Factorization::Cholesky(l) => {
                let mut y = rhs.to_vec();
                for i in 0..n {
                    let row = &l[i * n..i * n + i];
                    y[i] = (y[i] - dot(row, &y[..i])) / l[i * n + i];
                }
                for i in (0..n).rev() {
                    let mut s = y[i];
                    for k in i + 1..n {
                        s -= l[k * n + i] * y[k];
                    }
                    y[i] = s / l[i * n + i];
                }
                Ok(y)
            }
            Factorization::Lu { lu, perm } => {
                let mut y: Vec<f64> = perm.iter().map(|&r| rhs[r]).collect();
                for i in 0..n {
                    let row = &lu[i * n..i * n + i];
                    y[i] -= dot(row, &y[..i]);
                }
                for i in (0..n).rev() {
                    let row = &lu[i * n + i + 1..(i + 1) * n];
                    y[i] = (y[i] - dot(row, &y[i + 1..])) / lu[i * n + i];
                }
                Ok(y)
            }
        }
    }

    /// Solves for every column of `rhs`.
    pub fn solve_many(&self, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (r, k) = rhs.dim();
        if r != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: r,
            });
        }
        let mut out = Array2::zeros((r, k));
        for c in 0..k {
            let col: Vec<f64> = rhs.column(c).to_vec();
            let x = self.solve(&col)?;
            out.column_mut(c).assign(&Array1::from(x));
        }
        Ok(out)
    }
}

fn lu_in_place(mut a: Vec<f64>, n: usize, threshold: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut piv, mut best) = (k, a[k * n + k].abs());
        for r in k + 1..n {
            let v = a[r * n + k].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > threshold) {
            return Err(Error::SingularSystem { index: k, pivot: best });
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            perm.swap(k, piv);
        }
        let d = a[k * n + k];
        for r in k + 1..n {
            let f = a[r * n + k] / d;
            a[r * n + k] = f;
            if f != 0.0 {
                for c in k + 1..n {
                    a[r * n + c] -= f * a[k * n + c];
                }
            }
        }
    }
    Ok((a, perm))
}

/// Solves `M x = rhs` for a dense symmetric `M`.
pub fn solve_symmetric(m: ArrayView2<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    SymmetricSolver::new(m)?.solve(rhs)
}

/// Solves `M X = RHS` column by column with one factorization.
pub fn solve_symmetric_many(m: ArrayView2<f64>, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    SymmetricSolver::new(m)?.solve_many(rhs)
}
