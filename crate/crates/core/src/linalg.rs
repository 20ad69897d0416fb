//! Dense row-major `f64` matrices, a cyclic Jacobi symmetric eigensolver,
//! one-sided Jacobi SVD and the norms used by the optimizers and bound checks.
//!
//! Everything here is a pure function of immutable inputs.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative off-diagonal tolerance for [`sym_eig`].
pub const EIG_TOL: f64 = 1e-14;
/// Default relative truncation threshold for [`svd`].
pub const RANK_TOL: f64 = 1e-12;
/// Eigenvalues below `-PSD_TOL * lambda_max` mean the input is not PSD.
pub const PSD_TOL: f64 = 1e-8;
/// Eigenvalues at or below `PINV_RTOL * lambda_max` count as zero in
/// pseudo-inverse powers; rounding noise in an exactly singular Gram matrix
/// sits around `1e-16 * lambda_max`.
pub const PINV_RTOL: f64 = 1e-13;
/// Inputs with `||X - X^T||_F > SYM_TOL * ||X||_F` are rejected as non-symmetric.
pub const SYM_TOL: f64 = 1e-8;

const MAX_JACOBI_SWEEPS: usize = 100;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{:>12.6e} ", self[(r, c)])?;
            }
            writeln!(f)?;
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "data length differs from rows*cols",
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::from_vec",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literals in tests and examples.
    ///
    /// Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
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

    /// Outer product `u v^T`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `(X + X^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        debug_assert!(self.is_square());
        let n = self.rows;
        Self::from_fn(n, n, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Adds `delta` to every diagonal entry.
    pub fn add_diag(&self, delta: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.data[i * self.cols + i] += delta;
        }
        m
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `X X^T`, symmetric by construction.
    pub fn gram_rows(&self) -> Matrix {
        let m = self.rows;
        let mut g = Matrix::zeros(m, m);
        for i in 0..m {
            let ri = self.row(i);
            for j in i..m {
                let v: f64 = ri.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                g.data[i * m + j] = v;
                g.data[j * m + i] = v;
            }
        }
        g
    }

    /// `X^T X`, symmetric by construction.
    pub fn gram_cols(&self) -> Matrix {
        self.transpose().gram_rows()
    }

    /// Frobenius inner product `tr(A^T B)`.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "trace",
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok((0..self.rows).map(|i| self[(i, i)]).sum())
    }

    /// Column-major vectorization, the `vec(W) = (w_1; ...; w_n)` convention.
    pub fn vec_cols(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                v.push(self[(r, c)]);
            }
        }
        v
    }

    /// Inverse of [`Matrix::vec_cols`].
    pub fn unvec_cols(v: &[f64], rows: usize, cols: usize) -> Matrix {
        assert_eq!(v.len(), rows * cols);
        Matrix::from_fn(rows, cols, |r, c| v[c * rows + r])
    }

    /// Copies the column block `[start, start + width)`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols);
        Matrix::from_fn(self.rows, width, |r, c| self[(r, start + c)])
    }

    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            for c in 0..block.cols {
                self[(r, start + c)] = block[(r, c)];
            }
        }
    }

    /// Copies the sub-block at rows `[r0, r0+h)` and cols `[c0, c0+w)`.
    pub fn block(&self, r0: usize, c0: usize, h: usize, w: usize) -> Matrix {
        Matrix::from_fn(h, w, |r, c| self[(r0 + r, c0 + c)])
    }

    /// Inverse via Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "inverse",
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Matrix::identity(n);
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap_or(col);
            let p = a[(pivot, col)];
            if p.abs() <= 1e-14 * scale || !p.is_finite() {
                return Err(Error::Singular {
                    context: "inverse",
                    value: p,
                    hint: "add damping before inverting",
                });
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let ip = 1.0 / p;
            for c in 0..n {
                a.data[col * n + c] *= ip;
                inv.data[col * n + c] *= ip;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a.data[r * n + c] -= factor * a.data[col * n + c];
                    inv.data[r * n + c] -= factor * inv.data[col * n + c];
                }
            }
        }
        Ok(inv)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl AddAssign<&Matrix> for Matrix {
    fn add_assign(&mut self, rhs: &Matrix) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Matrix> for Matrix {
    fn sub_assign(&mut self, rhs: &Matrix) {
        self.axpy(-1.0, rhs);
    }
}

impl Mul<f64> for &Matrix {
    type Output = Matrix;
    fn mul(self, s: f64) -> Matrix {
        self.scale(s)
    }
}

/// Panicking product for shapes the caller has already validated.
impl Mul<&Matrix> for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        matmul(self, rhs).expect("matrix product shape mismatch")
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Orthogonal; column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// `Q diag(f(lambda)) Q^T`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, &w) in fl.iter().enumerate() {
                    s += q[(i, k)] * w * q[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

fn check_symmetric(x: &Matrix, op: &'static str) -> Result<()> {
    if !x.is_square() {
        return Err(Error::NotSquare {
            op,
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { context: op });
    }
    let asym = (x - &x.transpose()).frobenius();
    let norm = x.frobenius();
    if asym > SYM_TOL * norm {
        return Err(Error::InvalidArgument(format!(
            "{op}: input not symmetric (||X - X^T||_F = {asym:e}, ||X||_F = {norm:e})"
        )));
    }
    Ok(())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition.
///
/// The input is symmetrized as `(X + X^T)/2` first. Iteration stops once the
/// off-diagonal Frobenius norm of `Q^T X Q` is at most `tol * ||X||_F`.
pub fn sym_eig(x: &Matrix, tol: f64) -> Result<SymEig> {
    check_symmetric(x, "sym_eig")?;
    let n = x.rows();
    let mut a = x.symmetrize();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius();
    let target = tol * norm;

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= target || norm == 0.0 {
            break;
        }
        if sweeps >= MAX_JACOBI_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off / norm,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that cannot change the diagonal in floating point.
                let g = 100.0 * apq.abs();
                if sweeps > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !a.is_finite() {
            return Err(Error::NonFinite { context: "sym_eig" });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Compact singular value decomposition `X = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x r`
    pub u: Matrix,
    /// Descending, strictly positive.
    pub s: Vec<f64>,
    /// `n x r`
    pub v: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// The orthogonal polar factor `U V^T` restricted to the retained rank.
    pub fn polar_factor(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let r = self.rank();
        Matrix::from_fn(m, n, |i, j| {
            (0..r).map(|k| self.u[(i, k)] * self.v[(j, k)]).sum()
        })
    }

    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let r = self.rank();
        Matrix::from_fn(m, n, |i, j| {
            (0..r)
                .map(|k| self.u[(i, k)] * self.s[k] * self.v[(j, k)])
                .sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD; singular values below
/// `rank_tol * s_max` are dropped.
pub fn svd(x: &Matrix, rank_tol: f64) -> Result<Svd> {
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "svd" });
    }
    let (m, n) = x.shape();
    if m < n {
        let t = svd(&x.transpose(), rank_tol)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // m >= n: orthogonalize the n columns.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| x.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    let mut sweeps = 0;
    let mut worst = 0.0f64;
    while sweeps < MAX_JACOBI_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        worst = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha: f64 = cols[i].iter().map(|a| a * a).sum();
                let beta: f64 = cols[j].iter().map(|a| a * a).sum();
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(rel);
                if rel <= 1e-15 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (ai, bj) = (*a, *b);
                    *a = c * ai - s * bj;
                    *b = s * ai + c * bj;
                }
                let (lo, hi) = vcols.split_at_mut(j);
                for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (ai, bj) = (*a, *b);
                    *a = c * ai - s * bj;
                    *b = s * ai + c * bj;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps,
            residual: worst,
        });
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let s_max = norms.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| norms[k] > 0.0 && norms[k] > rank_tol * s_max)
        .collect();
    let r = keep.len();
    let u = Matrix::from_fn(m, r, |i, k| cols[keep[k]][i] / norms[keep[k]]);
    let v = Matrix::from_fn(n, r, |i, k| vcols[keep[k]][i]);
    let s = keep.iter().map(|&k| norms[k]).collect();
    Ok(Svd { u, s, v })
}

/// Spectral function of a symmetric PSD matrix:
/// `Q diag(max(lambda_i, floor)^p) Q^T`.
///
/// Eigenvalues in `[-PSD_TOL * lambda_max, 0)` are treated as zero. A negative
/// power hitting a zero eigenvalue is reported as singular.
pub fn psd_power(x: &Matrix, p: f64, floor: f64) -> Result<Matrix> {
    let eig = sym_eig(x, EIG_TOL)?;
    psd_power_from_eig(&eig, p, floor)
}

pub fn psd_power_from_eig(eig: &SymEig, p: f64, floor: f64) -> Result<Matrix> {
    check_psd(eig)?;
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(floor).max(0.0)).collect();
    if p < 0.0 {
        if let Some(&bad) = vals.iter().find(|&&l| l <= 0.0) {
            return Err(Error::Singular {
                context: "psd_power",
                value: bad,
                hint: "use a positive floor or damping for negative powers",
            });
        }
    }
    let mut clamped = eig.clone();
    clamped.eigenvalues = vals;
    Ok(clamped.reconstruct_with(|l| if l == 0.0 { 0.0 } else { l.powf(p) }))
}

/// Like [`psd_power`] but eigenvalues at or below `rtol * lambda_max` map to
/// zero for negative `p` (Moore-Penrose convention).
pub fn psd_pseudo_power(x: &Matrix, p: f64, rtol: f64) -> Result<Matrix> {
    let eig = sym_eig(x, EIG_TOL)?;
    check_psd(&eig)?;
    let cutoff = rtol * eig.max().max(0.0);
    Ok(eig.reconstruct_with(|l| {
        if l <= cutoff || l <= 0.0 {
            0.0
        } else {
            l.powf(p)
        }
    }))
}

fn check_psd(eig: &SymEig) -> Result<()> {
    let lmax = eig.max().abs().max(eig.min().abs());
    let threshold = -PSD_TOL * lmax;
    if eig.min() < threshold {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.min(),
            threshold,
        });
    }
    Ok(())
}

/// The norms used throughout the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub frobenius: f64,
    pub spectral: f64,
    pub trace_norm: f64,
    /// Only for square inputs.
    pub trace: Option<f64>,
}

pub fn norms(x: &Matrix) -> Result<Norms> {
    let s = svd(x, 0.0)?.s;
    Ok(Norms {
        frobenius: x.frobenius(),
        spectral: s.first().copied().unwrap_or(0.0),
        trace_norm: s.iter().sum(),
        trace: x.trace().ok(),
    })
}

pub fn spectral_norm(x: &Matrix) -> Result<f64> {
    Ok(svd(x, 0.0)?.s.first().copied().unwrap_or(0.0))
}

pub fn trace_norm(x: &Matrix) -> Result<f64> {
    Ok(svd(x, 0.0)?.s.iter().sum())
}

/// `tr(X^{1/2})` for symmetric PSD `X`, i.e. `||X^{1/2}||_*`.
pub fn trace_sqrt(x: &Matrix) -> Result<f64> {
    trace_power(x, 0.5)
}

/// `tr(X^p)` for symmetric PSD `X` and `p > 0`.
pub fn trace_power(x: &Matrix, p: f64) -> Result<f64> {
    let eig = sym_eig(x, EIG_TOL)?;
    check_psd(&eig)?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).powf(p)).sum())
}

/// Loewner order test: `A <= B` iff `lambda_min(B - A) >= -tol`.
pub fn loewner_leq(a: &Matrix, b: &Matrix, tol: f64) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "loewner_leq",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(min_eigenvalue(&(b - a))? >= -tol)
}

pub fn min_eigenvalue(x: &Matrix) -> Result<f64> {
    Ok(sym_eig(x, EIG_TOL)?.min())
}
