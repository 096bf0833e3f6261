//! Thin wrapper around the CSC sparse matrix and the sparse Cholesky
//! factorization used for all symmetric positive definite systems
//! (CEM forward systems and prior matrices).

use faer::linalg::solvers::Solve;
use faer::mat::MatMut;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use nalgebra::DVector;

use crate::error::{EitError, Result};

/// Sparse matrix in compressed sparse column form. Duplicate triplets are
/// summed on construction.
#[derive(Clone, Debug)]
pub struct SparseMat {
    inner: SparseColMat<usize, f64>,
}

impl SparseMat {
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let triplets: Vec<Triplet<usize, usize, f64>> = entries
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let inner = SparseColMat::try_new_from_triplets(nrows, ncols, &triplets)
            .map_err(|e| EitError::Solve(format!("sparse matrix construction: {e:?}")))?;
        Ok(Self { inner })
    }

    pub fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn nnz(&self) -> usize {
        self.inner.val().len()
    }

    /// y = A x
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols());
        let mut y = DVector::zeros(self.nrows());
        let sym = self.inner.symbolic();
        let col_ptr = sym.col_ptr();
        let row_idx = sym.row_idx();
        let val = self.inner.val();
        for j in 0..self.ncols() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in col_ptr[j]..col_ptr[j + 1] {
                y[row_idx[p]] += val[p] * xj;
            }
        }
        y
    }

    /// All stored entries as (row, col, value).
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let sym = self.inner.symbolic();
        let col_ptr = sym.col_ptr();
        let row_idx = sym.row_idx();
        let val = self.inner.val();
        let mut out = Vec::with_capacity(val.len());
        for j in 0..self.ncols() {
            for p in col_ptr[j]..col_ptr[j + 1] {
                out.push((row_idx[p], j, val[p]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows(), self.ncols());
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// max |A - A^T| over all entries; 0 for a symmetric matrix.
    pub fn max_asymmetry(&self) -> f64 {
        use std::collections::BTreeMap;
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in self.triplets() {
            *map.entry((i, j)).or_insert(0.0) += v;
        }
        let mut worst: f64 = 0.0;
        for (&(i, j), &v) in &map {
            let vt = map.get(&(j, i)).copied().unwrap_or(0.0);
            worst = worst.max((v - vt).abs());
        }
        worst
    }

    /// Scale all stored values in place.
    pub fn scale(&mut self, factor: f64) {
        for v in self.inner.val_mut() {
            *v *= factor;
        }
    }

    /// self + alpha * other, requiring the exact same sparsity pattern
    /// (same triplet support, e.g. both built over a shared pattern).
    pub fn add_scaled_same_pattern(&mut self, alpha: f64, other: &SparseMat) {
        let (va, vb) = (self.inner.val_mut(), other.inner.val());
        assert_eq!(va.len(), vb.len(), "sparsity patterns differ");
        for (a, b) in va.iter_mut().zip(vb) {
            *a += alpha * b;
        }
    }

    /// Cholesky factorization; fails if the matrix is not positive definite.
    pub fn cholesky(&self) -> Result<SparseCholesky> {
        let llt = self.inner.sp_cholesky(Side::Lower).map_err(|e| {
            EitError::Solve(format!(
                "sparse Cholesky failed (matrix not positive definite?): {e:?}"
            ))
        })?;
        Ok(SparseCholesky {
            llt,
            n: self.nrows(),
        })
    }

    /// Symbolic (structure only) Cholesky analysis, reusable across
    /// matrices with this sparsity pattern.
    pub fn symbolic_cholesky(&self) -> Result<SymbolicFactorization> {
        let symbolic = SymbolicLlt::try_new(self.inner.symbolic(), Side::Lower)
            .map_err(|e| EitError::Solve(format!("symbolic Cholesky failed: {e:?}")))?;
        Ok(SymbolicFactorization { symbolic })
    }

    /// Numeric factorization against a cached symbolic analysis.
    pub fn cholesky_with(&self, symbolic: &SymbolicFactorization) -> Result<SparseCholesky> {
        let llt = Llt::try_new_with_symbolic(
            symbolic.symbolic.clone(),
            self.inner.rb(),
            Side::Lower,
        )
        .map_err(|e| {
            EitError::Solve(format!(
                "sparse Cholesky failed (matrix not positive definite?): {e:?}"
            ))
        })?;
        Ok(SparseCholesky {
            llt,
            n: self.nrows(),
        })
    }

    /// New matrix with this sparsity pattern and values
    /// `alpha * self + beta * other` (patterns must coincide).
    pub fn linear_combination(&self, alpha: f64, beta: f64, other: &SparseMat) -> SparseMat {
        let (va, vb) = (self.inner.val(), other.inner.val());
        assert_eq!(va.len(), vb.len(), "sparsity patterns differ");
        let vals: Vec<f64> = va
            .iter()
            .zip(vb)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let symbolic = self
            .inner
            .symbolic()
            .to_owned()
            .expect("allocating a symbolic copy");
        SparseMat {
            inner: SparseColMat::new(symbolic, vals),
        }
    }
}

/// Symbolic Cholesky analysis (fill-reducing ordering and structure),
/// shared by all matrices with the same pattern.
#[derive(Clone)]
pub struct SymbolicFactorization {
    symbolic: SymbolicLlt<usize>,
}

/// Build two matrices over the union of the two triplet supports so their
/// value arrays align; linear combinations of the pair then reuse one
/// symbolic factorization.
pub fn shared_pattern_pair(
    nrows: usize,
    ncols: usize,
    a_triplets: &[(usize, usize, f64)],
    b_triplets: &[(usize, usize, f64)],
) -> Result<(SparseMat, SparseMat)> {
    let mut a_full = Vec::with_capacity(a_triplets.len() + b_triplets.len());
    let mut b_full = Vec::with_capacity(a_triplets.len() + b_triplets.len());
    a_full.extend_from_slice(a_triplets);
    a_full.extend(b_triplets.iter().map(|&(i, j, _)| (i, j, 0.0)));
    b_full.extend(a_triplets.iter().map(|&(i, j, _)| (i, j, 0.0)));
    b_full.extend_from_slice(b_triplets);
    let a = SparseMat::from_triplets(nrows, ncols, &a_full)?;
    let b = SparseMat::from_triplets(nrows, ncols, &b_full)?;
    debug_assert_eq!(a.nnz(), b.nnz());
    Ok((a, b))
}

/// Cached sparse Cholesky factor of a symmetric positive definite matrix.
pub struct SparseCholesky {
    llt: Llt<usize, f64>,
    n: usize,
}

impl SparseCholesky {
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len() % self.n, 0);
        let ncols = rhs.len() / self.n;
        let view = MatMut::from_column_major_slice_mut(rhs, self.n, ncols);
        self.llt.solve_in_place(view);
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut out = rhs.clone();
        self.solve_in_place(out.as_mut_slice());
        out
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}
