//! Dense row-major `f64` matrices and the handful of factorizations the
//! manifold and network code needs: products, a partial-pivot LU solve and a
//! Householder QR used for orthonormalization.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is singular: pivot {pivot} has magnitude {magnitude:e}")]
    Singular { pivot: usize, magnitude: f64 },
    #[error("columns are rank deficient at column {column} (|r| = {magnitude:e})")]
    RankDeficient { column: usize, magnitude: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Pivots smaller than this are treated as exact zeros by [`solve_linear`].
pub const SINGULAR_PIVOT: f64 = 1e-12;
/// Diagonal entries of R smaller than this make [`qr_orthonormalize`] fail.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(
            Matrix {
                rows: self.rows,
                cols: self.cols,
                data,
            },
            op,
        )
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

fn finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(LinalgError::NonFinite { op })
    }
}

/// Strided view used to feed the packed GEMM kernel with transposed operands
/// without materializing them.
struct View<'a> {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
    data: &'a [f64],
}

impl<'a> View<'a> {
    fn plain(m: &'a Matrix) -> Self {
        View {
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
            data: &m.data,
        }
    }

    fn transposed(m: &'a Matrix) -> Self {
        View {
            rows: m.cols,
            cols: m.rows,
            rs: 1,
            cs: m.cols as isize,
            data: &m.data,
        }
    }
}

fn gemm(a: View<'_>, b: View<'_>, op: &'static str) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape {
            op,
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if a.rows > 0 && b.cols > 0 && a.cols > 0 {
        // SAFETY: the views describe in-bounds strided layouts of their
        // backing slices and `out` is a fresh contiguous rows x cols buffer.
        unsafe {
            matrixmultiply::dgemm(
                a.rows,
                a.cols,
                b.cols,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
    }
    finite(out, op)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::plain(a), View::plain(b), "matmul")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::transposed(a), View::plain(b), "matmul_tn")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(View::plain(a), View::transposed(b), "matmul_nt")
}

/// LU factorization with partial pivoting, stored compactly (`L` unit lower
/// triangle below the diagonal, `U` on and above it).
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        if a.rows != a.cols {
            return Err(LinalgError::Shape {
                op: "lu",
                left: a.shape(),
                right: a.shape(),
            });
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (pivot_row, magnitude) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(magnitude >= SINGULAR_PIVOT) {
                return Err(LinalgError::Singular {
                    pivot: col,
                    magnitude,
                });
            }
            if pivot_row != col {
                for c in 0..n {
                    lu.swap(col * n + c, pivot_row * n + c);
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                if factor != 0.0 {
                    for c in col + 1..n {
                        lu[r * n + c] -= factor * lu[col * n + c];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows != n {
            return Err(LinalgError::Shape {
                op: "solve_linear",
                left: (n, n),
                right: b.shape(),
            });
        }
        let m = b.cols;
        let mut x = Matrix::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(i).copy_from_slice(b.row(p));
        }
        // forward substitution, unit lower triangle
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l != 0.0 {
                    for c in 0..m {
                        let v = x.data[j * m + c];
                        x.data[i * m + c] -= l * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u != 0.0 {
                    for c in 0..m {
                        let v = x.data[j * m + c];
                        x.data[i * m + c] -= u * v;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                x.data[i * m + c] /= d;
            }
        }
        finite(x, "solve_linear")
    }
}

/// Solves `a · X = b` by partial-pivot LU. Never forms an inverse.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols || a.rows != b.rows {
        return Err(LinalgError::Shape {
            op: "solve_linear",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Lu::factor(a)?.solve(b)
}

/// Orthonormalizes the columns of `m` with Householder QR and returns the
/// thin `Q`, with signs chosen so that `diag(R) > 0`.
pub fn qr_orthonormalize(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(LinalgError::Shape {
            op: "qr_orthonormalize",
            left: m.shape(),
            right: (cols, cols),
        });
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut diag_sign = vec![1.0; cols];
    for j in 0..cols {
        let x: Vec<f64> = (j..rows).map(|i| r.get(i, j)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < RANK_TOLERANCE {
            return Err(LinalgError::RankDeficient {
                column: j,
                magnitude: norm,
            });
        }
        // v = x + sign(x0)·‖x‖·e1 gives R[j][j] = -sign(x0)·‖x‖
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for c in j..cols {
                let dot: f64 = (j..rows).map(|i| v[i - j] * r.get(i, c)).sum();
                let s = 2.0 * dot / vnorm2;
                for i in j..rows {
                    let cur = r.get(i, c);
                    r.set(i, c, cur - s * v[i - j]);
                }
            }
        }
        let rjj = r.get(j, j);
        if rjj.abs() < RANK_TOLERANCE {
            return Err(LinalgError::RankDeficient {
                column: j,
                magnitude: rjj.abs(),
            });
        }
        diag_sign[j] = rjj.signum();
        reflectors.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first `cols` unit columns.
    let mut q = Matrix::zeros(rows, cols);
    for j in 0..cols {
        q.set(j, j, 1.0);
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * q.get(i, c)).sum();
            let s = 2.0 * dot / vnorm2;
            if s != 0.0 {
                for i in j..rows {
                    let cur = q.get(i, c);
                    q.set(i, c, cur - s * v[i - j]);
                }
            }
        }
    }
    for (c, sign) in diag_sign.iter().enumerate() {
        if *sign < 0.0 {
            for i in 0..rows {
                let cur = q.get(i, c);
                q.set(i, c, -cur);
            }
        }
    }
    finite(q, "qr_orthonormalize")
}

/// `‖mᵀm − I‖_F`.
pub fn orthonormality_error(m: &Matrix) -> f64 {
    let gram = gram(m);
    let mut acc = 0.0;
    for i in 0..gram.rows {
        for j in 0..gram.cols {
            let d = gram.get(i, j) - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// `mᵀm`, computed directly so small Gram matrices avoid the GEMM packing.
pub fn gram(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut g = Matrix::zeros(cols, cols);
    for i in 0..cols {
        for j in i..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += m.get(r, i) * m.get(r, j);
            }
            g.set(i, j, s);
            g.set(j, i, s);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn naive(a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        let mut mag = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                let mut m = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                    m += (a.get(i, k) * b.get(k, j)).abs();
                }
                out.set(i, j, s);
                mag.set(i, j, m);
            }
        }
        (out, mag)
    }

    #[test]
    fn matmul_identity_and_literal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);

        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[[2.0, 1.0], [4.0, 3.0]])
        );

        let c = matmul(&random(&mut rng, 2, 3), &random(&mut rng, 3, 1)).unwrap();
        assert_eq!(c.shape(), (2, 1));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            LinalgError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn matmul_variants_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (m, k, n) = (
                rng.random_range(1..40),
                rng.random_range(1..40),
                rng.random_range(1..40),
            );
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let (expect, mag) = naive(&a, &b);
            let checks = [
                matmul(&a, &b).unwrap(),
                matmul_tn(&a.transpose(), &b).unwrap(),
                matmul_nt(&a, &b.transpose()).unwrap(),
            ];
            for got in checks {
                for ((g, e), s) in got.data().iter().zip(expect.data()).zip(mag.data()) {
                    assert!((g - e).abs() <= 1e-13 * s.max(f64::MIN_POSITIVE));
                }
            }
        }
    }

    #[test]
    fn solve_examples() {
        let b = Matrix::from_rows(&[[1.5], [-2.0], [0.25]]);
        assert_eq!(solve_linear(&Matrix::identity(3), &b).unwrap(), b);

        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let b = Matrix::from_rows(&[[2.0], [8.0]]);
        assert_eq!(
            solve_linear(&a, &b).unwrap(),
            Matrix::from_rows(&[[1.0], [2.0]])
        );
    }

    #[test]
    fn solve_zero_row_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random(&mut rng, 5, 5);
        a.row_mut(2).fill(0.0);
        let err = solve_linear(&a, &random(&mut rng, 5, 1)).unwrap_err();
        assert!(matches!(err, LinalgError::Singular { .. }), "{err:?}");
    }

    #[test]
    fn solve_random_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            let m = rng.random_range(1..4);
            // diagonally shifted Gaussian: well conditioned with high probability
            let mut a = random(&mut rng, n, n);
            for i in 0..n {
                let v = a.get(i, i);
                a.set(i, i, v + 3.0 * (n as f64).sqrt());
            }
            let b = random(&mut rng, n, m);
            let x = solve_linear(&a, &b).unwrap();
            let r = matmul(&a, &x).unwrap().sub(&b).unwrap();
            assert!(r.frobenius_norm() <= 1e-10 * (1.0 + b.frobenius_norm()));
        }
    }

    #[test]
    fn qr_examples() {
        let q = qr_orthonormalize(&Matrix::from_rows(&[[3.0], [4.0]])).unwrap();
        assert!((q.get(0, 0) - 0.6).abs() < 1e-15 && (q.get(1, 0) - 0.8).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = qr_orthonormalize(&random(&mut rng, 7, 3)).unwrap();
        let again = qr_orthonormalize(&base).unwrap();
        assert!(again.sub(&base).unwrap().frobenius_norm() < 1e-12);

        let dup = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(
            qr_orthonormalize(&dup),
            Err(LinalgError::RankDeficient { column: 1, .. })
        ));
    }

    #[test]
    fn qr_random_orthonormal_and_positive_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let cols = rng.random_range(1..=16);
            let rows = rng.random_range(cols..=128);
            let m = random(&mut rng, rows, cols);
            let q = qr_orthonormalize(&m).unwrap();
            assert!(orthonormality_error(&q) <= 1e-12);
            // R = QᵀM must be upper triangular with a positive diagonal
            let r = matmul_tn(&q, &m).unwrap();
            for j in 0..cols {
                assert!(r.get(j, j) > 0.0);
            }
        }
    }

    #[test]
    fn gram_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(&mut rng, 9, 4);
        let g = gram(&m);
        let h = matmul_tn(&m, &m).unwrap();
        assert!(g.sub(&h).unwrap().max_abs() < 1e-13);
    }
}
