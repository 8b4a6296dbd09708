//! Dense symmetric linear algebra for exact GP inference.
//!
//! Everything here is plain row-major `f64` storage. The only operations the
//! rest of the crate needs are a Cholesky factorization with an adaptive
//! jitter ladder, triangular solves, the log-determinant, and a full SPD
//! inverse (for the trace form of the marginal-likelihood gradient). The
//! O(n^3) inner loops are blocked and routed through `matrixmultiply` so that
//! desk-scale kernel matrices (n up to a few thousand) stay tractable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block size for the panel updates in Cholesky and the triangular solves.
const NB: usize = 64;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (jitter ladder exhausted at cap {cap:e})")]
    NotPositiveDefinite { cap: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds from a flat row-major slice; `data.len()` must equal `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, plain GEMM.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self * other^T`.
    pub fn matmul_transb(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transb shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `self^T * other`.
    pub fn matmul_transa(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_transa shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` is optional transposition.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(c.rows, m, "gemm output rows mismatch");
    assert_eq!(c.cols, n, "gemm output cols mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // Safety: shapes and strides are checked above, buffers are owned Vecs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Raw-pointer GEMM on sub-blocks of row-major matrices, used by the blocked
/// factorization below. Strides are the *parent* row strides.
unsafe fn gemm_block(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    lda: usize,
    ta: bool,
    b: *const f64,
    ldb: usize,
    tb: bool,
    beta: f64,
    c: *mut f64,
    ldc: usize,
) {
    let (rsa, csa) = if ta { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if tb { (1, ldb as isize) } else { (ldb as isize, 1) };
    matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, ldc as isize, 1);
}

/// Symmetric matrix; symmetrized as `(A + A^T) / 2` on construction because
/// kernel assembly accumulates asymmetric rounding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymMatrix {
    mat: Matrix,
}

impl SymMatrix {
    /// Symmetrizes and validates a square matrix.
    pub fn symmetrize(mut mat: Matrix) -> Result<Self, LinalgError> {
        if mat.rows != mat.cols {
            return Err(LinalgError::DimensionMismatch { expected: mat.rows, got: mat.cols });
        }
        for i in 0..mat.rows {
            for j in 0..i {
                let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
                mat[(i, j)] = v;
                mat[(j, i)] = v;
            }
        }
        if !mat.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        Ok(SymMatrix { mat })
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self, LinalgError> {
        Self::symmetrize(Matrix::from_fn(n, n, f))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix { mat: Matrix::identity(n) }
    }

    pub fn n(&self) -> usize {
        self.mat.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.mat[idx]
    }
}

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: Matrix,
    jitter_used: f64,
}

/// Jitter escalation ladder: a zero base starts at 1e-8, each retry
/// multiplies by 10, and the ladder stops at 1e-2.
const JITTER_FLOOR: f64 = 1e-8;
const JITTER_CAP: f64 = 1e-2;

/// Cholesky factorization of `a + jitter * I`, escalating the jitter until
/// the factorization succeeds or the ladder cap is reached.
pub fn cholesky(a: &SymMatrix, base_jitter: f64) -> Result<CholFactor, LinalgError> {
    let mut jitter = base_jitter.max(0.0);
    loop {
        let mut work = a.mat.clone();
        if jitter > 0.0 {
            for i in 0..work.rows {
                work[(i, i)] += jitter;
            }
        }
        if cholesky_in_place(&mut work) {
            // clear the untouched upper triangle
            for i in 0..work.rows {
                for j in (i + 1)..work.cols {
                    work[(i, j)] = 0.0;
                }
            }
            return Ok(CholFactor { lower: work, jitter_used: jitter });
        }
        if jitter >= JITTER_CAP {
            return Err(LinalgError::NotPositiveDefinite { cap: JITTER_CAP });
        }
        jitter = if jitter == 0.0 { JITTER_FLOOR } else { (jitter * 10.0).min(JITTER_CAP) };
    }
}

/// Blocked right-looking Cholesky on the lower triangle. Returns false on a
/// non-positive (or non-finite) pivot.
fn cholesky_in_place(a: &mut Matrix) -> bool {
    let n = a.rows;
    let lda = a.cols;
    let mut k = 0;
    while k < n {
        let kbs = NB.min(n - k);
        // factor the diagonal block (left-looking within the block; columns
        // to the left of k were already applied by earlier trailing updates)
        for j in k..k + kbs {
            let rowj = &a.data[j * lda..j * lda + lda];
            let mut d = rowj[j] - dot(&rowj[k..j], &rowj[k..j]);
            if !(d.is_finite() && d > 0.0) {
                return false;
            }
            d = d.sqrt();
            a.data[j * lda + j] = d;
            for i in (j + 1)..k + kbs {
                let (upper, lower) = a.data.split_at_mut(i * lda);
                let rowj = &upper[j * lda..j * lda + lda];
                let rowi = &mut lower[..lda];
                rowi[j] = (rowi[j] - dot(&rowi[k..j], &rowj[k..j])) / d;
            }
        }
        if k + kbs < n {
            // panel solve: A[k+kbs.., k..k+kbs] := A[k+kbs.., k..k+kbs] * L11^-T
            for r in k + kbs..n {
                let (upper, lower) = a.data.split_at_mut(r * lda);
                let rowr = &mut lower[..lda];
                for j in k..k + kbs {
                    let rowj = &upper[j * lda..j * lda + lda];
                    rowr[j] = (rowr[j] - dot(&rowr[k..j], &rowj[k..j])) / rowj[j];
                }
            }
            // trailing update: A22 -= P * P^T (lower block rows only)
            let mut i0 = k + kbs;
            while i0 < n {
                let ib = NB.min(n - i0);
                let ncols = i0 + ib - (k + kbs);
                // Safety: the three regions are within bounds; the output
                // block does not overlap the panel operands.
                unsafe {
                    let base = a.data.as_mut_ptr();
                    gemm_block(
                        ib,
                        kbs,
                        ncols,
                        -1.0,
                        base.add(i0 * lda + k),
                        lda,
                        false,
                        base.add((k + kbs) * lda + k),
                        lda,
                        true,
                        1.0,
                        base.add(i0 * lda + (k + kbs)),
                        lda,
                    );
                }
                i0 += ib;
            }
        }
        k += kbs;
    }
    true
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.lower.rows
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// log det(A + jitter * I) = 2 * sum(log diag(L)).
    pub fn logdet(&self) -> f64 {
        (0..self.n()).map(|i| self.lower[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solves `(A + jitter * I) x = b` for a single right-hand side.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.n();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
        }
        let mut x = b.to_vec();
        // forward: L y = b
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] = (x[i] - s) / row[i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lower[(j, i)] * x[j];
            }
            x[i] = s / self.lower[(i, i)];
        }
        Ok(x)
    }

    /// Solves `(A + jitter * I) X = B` column-wise for a matrix right-hand side.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix, LinalgError> {
        let n = self.n();
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.rows });
        }
        let mut x = b.clone();
        solve_lower_blocked(&self.lower, &mut x);
        solve_lower_trans_blocked(&self.lower, &mut x);
        Ok(x)
    }

    /// Full inverse `(A + jitter * I)^-1`, needed for the trace term of the
    /// marginal-likelihood gradient.
    pub fn inverse(&self) -> Matrix {
        let n = self.n();
        let mut x = Matrix::identity(n);
        solve_lower_blocked(&self.lower, &mut x);
        solve_lower_trans_blocked(&self.lower, &mut x);
        x
    }
}

/// In-place blocked solve of `L X = B`.
fn solve_lower_blocked(l: &Matrix, b: &mut Matrix) {
    let n = l.rows;
    let m = b.cols;
    let mut k = 0;
    while k < n {
        let kbs = NB.min(n - k);
        for j in k..k + kbs {
            for p in k..j {
                let ljp = l[(j, p)];
                if ljp != 0.0 {
                    let (rows_p, rows_j) = b.data.split_at_mut(j * m);
                    let rp = &rows_p[p * m..p * m + m];
                    let rj = &mut rows_j[..m];
                    for (x, y) in rj.iter_mut().zip(rp) {
                        *x -= ljp * y;
                    }
                }
            }
            let d = l[(j, j)];
            for x in b.row_mut(j) {
                *x /= d;
            }
        }
        if k + kbs < n {
            // Safety: L block and the two disjoint row ranges of B are in bounds.
            unsafe {
                gemm_block(
                    n - k - kbs,
                    kbs,
                    m,
                    -1.0,
                    l.data.as_ptr().add((k + kbs) * l.cols + k),
                    l.cols,
                    false,
                    b.data.as_ptr().add(k * m),
                    m,
                    false,
                    1.0,
                    b.data.as_mut_ptr().add((k + kbs) * m),
                    m,
                );
            }
        }
        k += kbs;
    }
}

/// In-place blocked solve of `L^T X = B`.
fn solve_lower_trans_blocked(l: &Matrix, b: &mut Matrix) {
    let n = l.rows;
    let m = b.cols;
    let nblocks = n.div_ceil(NB);
    for bi in (0..nblocks).rev() {
        let k = bi * NB;
        let kbs = NB.min(n - k);
        if k + kbs < n {
            // subtract contributions of already-solved rows below this block
            unsafe {
                gemm_block(
                    kbs,
                    n - k - kbs,
                    m,
                    -1.0,
                    l.data.as_ptr().add((k + kbs) * l.cols + k),
                    l.cols,
                    true,
                    b.data.as_ptr().add((k + kbs) * m),
                    m,
                    false,
                    1.0,
                    b.data.as_mut_ptr().add(k * m),
                    m,
                );
            }
        }
        for j in (k..k + kbs).rev() {
            let d = l[(j, j)];
            for x in b.row_mut(j) {
                *x /= d;
            }
            for p in k..j {
                let ljp = l[(j, p)];
                if ljp != 0.0 {
                    let (rows_p, rows_j) = b.data.split_at_mut(j * m);
                    let rp = &mut rows_p[p * m..p * m + m];
                    let rj = &rows_j[..m];
                    for (x, y) in rp.iter_mut().zip(rj) {
                        *x -= ljp * y;
                    }
                }
            }
        }
    }
}
