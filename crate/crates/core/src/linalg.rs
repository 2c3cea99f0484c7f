//! Row-major dense matrices and the matrix-product kernels used by the
//! convolution engine.

use crate::error::{shape_mismatch, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_mismatch("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape_mismatch(
                "matmul",
                &[self.rows, self.cols],
                &[rhs.rows, rhs.cols],
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        Ok(out)
    }

    /// Scales column `j` by `s[j]`.
    pub fn scale_columns(&self, s: &[T]) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            for (v, &f) in row.iter_mut().zip(s) {
                *v *= f;
            }
        }
        out
    }

    /// Scales row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[T]) -> Self {
        let mut out = self.clone();
        for (row, &f) in out.data.chunks_exact_mut(self.cols).zip(s) {
            for v in row {
                *v *= f;
            }
        }
        out
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self::from_fn(self.rows, keep.len(), |i, j| self[(i, keep[j])])
    }

    pub fn select_rows(&self, keep: &[usize]) -> Self {
        Self::from_fn(keep.len(), self.cols, |i, j| self[(keep[i], j)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
///
/// Each output entry accumulates its `k` terms in index order, so dropping
/// terms whose `a` factor is zero leaves the result bit-identical.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n.max(1))).take(m) {
        for (c_ij, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub fn gemm_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_j) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_j;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum()
        })
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 2.0);
        let b = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.25);
        let expected = naive(&a, &b);
        assert_eq!(a.matmul(&b).unwrap(), expected);

        let bt = b.transpose();
        let mut c = vec![0.0; 20];
        gemm_bt(a.data(), bt.data(), &mut c, 5, 3, 4);
        assert!(Matrix::from_vec(5, 4, c).unwrap().max_abs_diff(&expected) < 1e-12);

        let at = a.transpose();
        let mut c = vec![0.0; 20];
        gemm_at(at.data(), b.data(), &mut c, 3, 5, 4);
        assert!(Matrix::from_vec(5, 4, c).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    }
}
