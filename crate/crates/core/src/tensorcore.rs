//! Dense row-major matrices and the handful of factorizations the rest of
//! the crate is built on: Householder QR, orthogonal projection and low-rank
//! updates.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual-norm threshold, relative to the largest input column, below which
/// a column is treated as linearly dependent and dropped by [`qr_decompose`].
pub const RANK_TOL: f64 = 1e-10;

/// Largest tolerated `‖QᵀQ − I‖∞` for an input that must be orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(r).iter().take(8).map(|v| format!("{v:+.4e}")).collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        Self::from_fn(rows, columns.len(), |r, c| columns[c][r])
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.values[k * other.cols..(k + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let src = &other.values[k * other.cols..(k + 1) * other.cols];
            for i in 0..self.cols {
                let a = self.values[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, values })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, values })
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "hcat with {} and {} rows",
                self.rows, other.rows
            )));
        }
        Ok(Matrix::from_fn(self.rows, self.cols + other.cols, |r, c| {
            if c < self.cols {
                self[(r, c)]
            } else {
                other[(r, c - self.cols)]
            }
        }))
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        Matrix::from_fn(self.rows, n, |r, c| self[(r, c)])
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.values[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.values[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin QR factorization with rank-revealing column drops.
#[derive(Debug, Clone)]
pub struct Qr {
    /// `m × k` with orthonormal columns, `k` = number of kept columns.
    pub q: Matrix,
    /// `k × n`, upper triangular on the kept columns, nonnegative diagonal.
    pub r: Matrix,
    /// Indices of the input columns that contributed a new direction.
    pub kept: Vec<usize>,
}

/// Householder QR of `b` (m × n).
///
/// A column whose residual norm, after removing the directions already
/// spanned, falls below `RANK_TOL × max column norm` is dropped; `q` then has
/// fewer than `n` columns. The diagonal of `r` is made nonnegative by flipping
/// signs of matching `q` columns / `r` rows, which makes the factorization
/// unique for full-rank inputs.
pub fn qr_decompose(b: &Matrix) -> Result<Qr> {
    let (m, n) = b.shape();
    let max_norm = (0..n)
        .map(|c| (0..m).map(|r| b[(r, c)] * b[(r, c)]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if n == 0 || m == 0 || max_norm == 0.0 {
        return Err(Error::DegenerateInput("all columns are zero".into()));
    }
    let tol = RANK_TOL * max_norm;

    let mut work = b.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();

    for j in 0..n {
        let k = reflectors.len();
        if k == m {
            break;
        }
        let norm = (k..m).map(|r| work[(r, j)] * work[(r, j)]).sum::<f64>().sqrt();
        if norm < tol {
            continue;
        }
        let x0 = work[(k, j)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        // v lives on rows k..m
        let mut v: Vec<f64> = (k..m).map(|r| work[(r, j)]).collect();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv > 0.0 {
            for c in 0..n {
                let s: f64 = (k..m).map(|r| v[r - k] * work[(r, c)]).sum::<f64>() * 2.0 / vv;
                if s != 0.0 {
                    for r in k..m {
                        work[(r, c)] -= s * v[r - k];
                    }
                }
            }
        }
        work[(k, j)] = alpha;
        for r in k + 1..m {
            work[(r, j)] = 0.0;
        }
        reflectors.push(v);
        kept.push(j);
    }

    let k = reflectors.len();
    let mut q = Matrix::from_fn(m, k, |r, c| if r == c { 1.0 } else { 0.0 });
    for (idx, v) in reflectors.iter().enumerate().rev() {
        let vv = dot(v, v);
        if vv == 0.0 {
            continue;
        }
        for c in 0..k {
            let s: f64 = (idx..m).map(|r| v[r - idx] * q[(r, c)]).sum::<f64>() * 2.0 / vv;
            if s != 0.0 {
                for r in idx..m {
                    q[(r, c)] -= s * v[r - idx];
                }
            }
        }
    }
    let mut r = Matrix::from_fn(k, n, |i, c| work[(i, c)]);
    for (i, &col) in kept.iter().enumerate() {
        if r[(i, col)] < 0.0 {
            r.row_mut(i).iter_mut().for_each(|v| *v = -*v);
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok(Qr { q, r, kept })
}

/// `‖QᵀQ − I‖∞` (zero for a matrix with no columns).
pub fn orthonormality_error(q: &Matrix) -> f64 {
    let gram = q.matmul_tn(q).expect("square gram");
    let mut worst: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// `W0 − Q Qᵀ W0`: removes from `w0` every component along the column span
/// of `q`, acting on the row space (the rows of `w0` index the same space as
/// the rows of `q`).
pub fn project_out(w0: &Matrix, q: &Matrix) -> Result<Matrix> {
    if q.rows() != w0.rows() {
        return Err(Error::ShapeMismatch(format!(
            "projection basis has {} rows, weight has {}",
            q.rows(),
            w0.rows()
        )));
    }
    if q.cols() == 0 {
        return Ok(w0.clone());
    }
    let err = orthonormality_error(q);
    if err > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal(err));
    }
    let coeff = q.matmul_tn(w0)?;
    w0.sub(&q.matmul(&coeff)?)
}

/// `W0 + B·A`.
pub fn low_rank_update(w0: &Matrix, b: &Matrix, a: &Matrix) -> Result<Matrix> {
    if b.cols() != a.rows() || b.rows() != w0.rows() || a.cols() != w0.cols() {
        return Err(Error::ShapeMismatch(format!(
            "W0 {:?}, B {:?}, A {:?}",
            w0.shape(),
            b.shape(),
            a.shape()
        )));
    }
    w0.add(&b.matmul(a)?)
}

/// Solves `Y · Rᵀ = X` for upper-triangular invertible `R`, i.e. `Y = X R⁻ᵀ`.
pub fn solve_right_upper_transpose(x: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = r.rows();
    if r.cols() != n || x.cols() != n {
        return Err(Error::ShapeMismatch("triangular solve".into()));
    }
    let mut y = Matrix::zeros(x.rows(), n);
    for row in 0..x.rows() {
        // R z = x_row, back substitution
        let xr = x.row(row);
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = xr[i];
            for j in i + 1..n {
                s -= r[(i, j)] * z[j];
            }
            let d = r[(i, i)];
            if d == 0.0 {
                return Err(Error::Numerical("singular triangular factor".into()));
            }
            z[i] = s / d;
        }
        y.row_mut(row).copy_from_slice(&z);
    }
    Ok(y)
}

/// Reverse-mode derivative of the `Q` factor of a full-rank thin QR.
///
/// Given `∂L/∂Q` for `B = QR` (m ≥ n, no dropped columns), returns `∂L/∂B`:
/// `[(I − QQᵀ) Q̄ + Q · tril₋(M − Mᵀ)] R⁻ᵀ` with `M = QᵀQ̄`.
pub fn qr_q_backward(q: &Matrix, r: &Matrix, q_bar: &Matrix) -> Result<Matrix> {
    let n = q.cols();
    if r.shape() != (n, n) || q_bar.shape() != q.shape() {
        return Err(Error::ShapeMismatch("qr backward expects a full-rank factorization".into()));
    }
    let m = q.matmul_tn(q_bar)?;
    let mut skew = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            skew[(i, j)] = m[(i, j)] - m[(j, i)];
        }
    }
    // (I − QQᵀ)Q̄ = Q̄ − Q M
    let mut lhs = q_bar.sub(&q.matmul(&m)?)?;
    lhs.axpy(1.0, &q.matmul(&skew)?)?;
    solve_right_upper_transpose(&lhs, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_of_identity_is_identity() {
        let qr = qr_decompose(&Matrix::identity(2)).unwrap();
        assert_eq!(qr.q.max_abs_diff(&Matrix::identity(2)), 0.0);
        assert_eq!(qr.r.max_abs_diff(&Matrix::identity(2)), 0.0);
    }

    #[test]
    fn qr_of_single_column() {
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let qr = qr_decompose(&b).unwrap();
        assert!((qr.q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((qr.q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((qr.r[(0, 0)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn qr_drops_dependent_columns() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let qr = qr_decompose(&b).unwrap();
        assert_eq!(qr.kept, vec![0, 2]);
        assert_eq!(qr.q.cols(), 2);
        let recon = qr.q.matmul(&qr.r).unwrap();
        assert!(recon.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn qr_rejects_zero_matrix() {
        assert!(matches!(qr_decompose(&Matrix::zeros(3, 2)), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn project_out_empty_and_full() {
        let w = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 + 0.5);
        assert_eq!(project_out(&w, &Matrix::zeros(3, 0)).unwrap(), w);
        let full = project_out(&w, &Matrix::identity(3)).unwrap();
        assert!(full.max_abs() < 1e-15);
    }

    #[test]
    fn project_out_rejects_non_orthonormal() {
        let w = Matrix::identity(2);
        let q = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(matches!(project_out(&w, &q), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn low_rank_update_examples() {
        let w0 = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let w = low_rank_update(&w0, &b, &a).unwrap();
        assert_eq!(w, Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        assert_eq!(low_rank_update(&w0, &Matrix::zeros(2, 1), &a).unwrap(), w0);
        assert_eq!(low_rank_update(&w0, &b, &Matrix::zeros(1, 2)).unwrap(), w0);
        assert!(matches!(
            low_rank_update(&w0, &Matrix::zeros(3, 1), &a),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![0.0]).is_err());
    }
}
