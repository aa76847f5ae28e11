//! Row-major dense `f64` matrix.
//!
//! Storage is `data[i * cols + j] = A[i, j]`. Kernels are plain loops written
//! so the inner loop runs over contiguous rows and auto-vectorizes.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = self.row(i);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6e}")).collect();
            let ellipsis = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), ellipsis)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Wraps row-major `data`. Fails if the length does not match or a
    /// dimension is zero.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "dimensions must be positive",
            });
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape {
                rows,
                cols,
                reason: "data length does not equal rows * cols",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN/Inf entries.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Self::from_vec(rows, cols, data)
    }

    /// Builds a matrix from row slices.
    ///
    /// # Panics
    /// Panics on an empty or ragged input; meant for literals in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        assert!(cols > 0, "from_rows needs at least one column");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in from_rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Single-column matrix.
    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec()).expect("non-empty column vector")
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, &v) in row.iter().enumerate() {
                out[j * self.rows + i] = v;
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        out.gemm_acc(1.0, self, rhs)?;
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        let n = rhs.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a_row, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `self += alpha · a · b`.
    pub fn gemm_acc(&mut self, alpha: f64, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.rows || self.rows != a.rows || self.cols != b.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let n = b.cols;
        for i in 0..a.rows {
            let out_row = &mut self.data[i * n..(i + 1) * n];
            for (k, &aik) in a.row(i).iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let coef = alpha * aik;
                for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                    *o += coef * bkj;
                }
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        out.scale_in_place(alpha);
        out
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Entrywise (Frobenius) inner product.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute column sum.
    pub fn norm_one(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Squared Euclidean norm of every column, accumulated row by row.
    pub fn column_sq_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in acc.iter_mut().zip(self.row(i)) {
                *s += v * v;
            }
        }
        acc
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut norms = self.column_sq_norms();
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        norms
    }

    /// `self · Diag(d)`: column `j` scaled by `d[j]`.
    pub fn diag_right_mul(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "diag_right_mul",
                lhs: self.shape(),
                rhs: (d.len(), d.len()),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &s) in out.row_mut(i).iter_mut().zip(d) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// `Diag(d) · self`: row `i` scaled by `d[i]`.
    pub fn diag_left_mul(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "diag_left_mul",
                lhs: (d.len(), d.len()),
                rhs: self.shape(),
            });
        }
        let mut out = self.clone();
        for (i, &s) in d.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// Relative Frobenius deviation `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> Result<f64> {
        let diff = self.sub(other)?.frobenius_norm();
        let denom = other.frobenius_norm().max(f64::MIN_POSITIVE);
        Ok(if diff == 0.0 { 0.0 } else { diff / denom })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self + selfᵀ‖_F`; zero for an exactly skew-symmetric matrix.
    pub fn skew_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s = self.get(i, j) + self.get(j, i);
                acc += s * s;
            }
        }
        acc.sqrt()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix {
        let data = (0..rows * cols)
            .map(|k| ((k as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let x = pseudo(3, 3, 1);
        assert_eq!(Matrix::identity(3).matmul(&x).unwrap(), x);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(
            a.matmul(&p).unwrap(),
            Matrix::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = pseudo(5, 4, 2);
        let b = pseudo(4, 3, 3);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-14);
        let tn = a.transpose().matmul_tn(&b).unwrap();
        assert!(tn.max_abs_diff(&fast).unwrap() <= 1e-14);
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&fast).unwrap() <= 1e-14);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = pseudo(2, 3, 0).matmul(&pseudo(2, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn transpose_rules() {
        let x = pseudo(4, 7, 5);
        assert_eq!(x.transpose().transpose(), x);
        assert_eq!(Matrix::identity(4).transpose(), Matrix::identity(4));
        let row = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let col = row.transpose();
        assert_eq!(col.shape(), (3, 1));
        assert_eq!(col.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn norms() {
        assert_eq!(Matrix::zeros(3, 4).frobenius_norm(), 0.0);
        assert!((Matrix::identity(5).frobenius_norm() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(Matrix::identity(3).column_norms(), vec![1.0, 1.0, 1.0]);
        assert_eq!(Matrix::from_rows(&[&[3.0], &[4.0]]).column_norms(), vec![5.0]);

        let x = pseudo(4, 3, 9);
        for (j, norm) in x.column_norms().into_iter().enumerate() {
            let direct: f64 = (0..4).map(|i| x[(i, j)].powi(2)).sum::<f64>().sqrt();
            assert!((norm - direct).abs() <= 1e-14);
        }
    }

    #[test]
    fn diag_right_mul_cases() {
        let w = pseudo(4, 4, 11);
        assert_eq!(w.diag_right_mul(&[1.0; 4]).unwrap(), w);
        assert_eq!(
            Matrix::identity(2).diag_right_mul(&[2.0, 3.0]).unwrap(),
            Matrix::from_diag(&[2.0, 3.0])
        );
        let d = [0.5, -1.5, 2.0, 0.25];
        let explicit = w.matmul(&Matrix::from_diag(&d)).unwrap();
        assert!(w.diag_right_mul(&d).unwrap().max_abs_diff(&explicit).unwrap() <= 1e-15);
        assert!(w.diag_right_mul(&[1.0; 3]).is_err());
    }

    #[test]
    fn construction_validates() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
        assert!(matches!(
            Matrix::from_vec_finite(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }
}
