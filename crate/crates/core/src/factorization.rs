//! Compact SVD of reshaped convolution weights.
//!
//! A kernel `[kh, kw, c_in, c_out]` is viewed as a `k × c_out` matrix with
//! `k = kh·kw·c_in` (row index enumerating `(kh, kw, c_in)` exactly as the
//! im2col patches do) and factorized as `W = U·diag(σ)·Vᵀ` with
//! `r = min(k, c_out)` retained directions.
//!
//! The decomposition is computed in `f64` by one-sided (Hestenes) Jacobi.
//! Tall inputs are first reduced with a Householder QR so the rotations run
//! on an `r × r` triangle; wide inputs are factorized through their
//! transpose.

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pairwise orthogonality target for the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFactorization<T: Scalar = f32> {
    /// Left singular vectors, `k × r`.
    pub u: Matrix<T>,
    /// Singular values, descending.
    pub sigma: Vec<T>,
    /// Right singular vectors, `c_out × r`.
    pub v: Matrix<T>,
    /// Jacobi sweeps used.
    pub sweeps: usize,
}

impl<T: Scalar> WeightFactorization<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U·diag(σ)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .scale_columns(&self.sigma)
            .matmul(&self.v.transpose())
            .expect("factor shapes agree")
    }

    /// `diag(σ)·Vᵀ`, the `r × c_out` matrix held by a basis-scaling layer.
    pub fn scaled_vt(&self) -> Matrix<T> {
        self.v.transpose().scale_rows(&self.sigma)
    }

    /// Max-abs deviation of `UᵀU` and `VᵀV` from the identity.
    pub fn orthonormality_residuals(&self) -> (f64, f64) {
        (gram_residual(&self.u), gram_residual(&self.v))
    }
}

fn gram_residual<T: Scalar>(m: &Matrix<T>) -> f64 {
    let r = m.cols();
    let mut worst = 0.0f64;
    for a in 0..r {
        for b in a..r {
            let dot: f64 = (0..m.rows())
                .map(|i| m[(i, a)].as_f64() * m[(i, b)].as_f64())
                .sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Flattens `[kh, kw, c_in, c_out]` into a `k × c_out` matrix.
pub fn reshape_weights<T: Scalar>(kernel: &Tensor<T>) -> Result<Matrix<T>> {
    if kernel.rank() != 4 {
        return Err(Error::InvalidArgument(format!(
            "conv kernel must be rank 4, got shape {:?}",
            kernel.shape()
        )));
    }
    let s = kernel.shape();
    Matrix::from_vec(s[0] * s[1] * s[2], s[3], kernel.data().to_vec())
}

/// Inverse of [`reshape_weights`].
pub fn unreshape_weights<T: Scalar>(
    matrix: &Matrix<T>,
    kh: usize,
    kw: usize,
    c_in: usize,
) -> Result<Tensor<T>> {
    if kh * kw * c_in != matrix.rows() {
        return Err(shape_mismatch(
            "unreshape_weights",
            &[kh, kw, c_in],
            &[matrix.rows(), matrix.cols()],
        ));
    }
    Tensor::new(vec![kh, kw, c_in, matrix.cols()], matrix.data().to_vec())
}

/// Compact SVD `W = U·diag(σ)·Vᵀ` of a `k × c_out` matrix.
pub fn compact_svd<T: Scalar>(w: &Matrix<T>) -> Result<WeightFactorization<T>> {
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "compact_svd input has non-finite entries".into(),
        ));
    }
    let a: Matrix<f64> = w.cast();
    let (rows, cols) = (a.rows(), a.cols());
    let (u, sigma, v, sweeps) = if rows >= cols {
        svd_tall(&a)?
    } else {
        let (u_t, sigma, v_t, sweeps) = svd_tall(&a.transpose())?;
        (v_t, sigma, u_t, sweeps)
    };
    let (u, sigma, v) = canonicalize(u, sigma, v);
    Ok(WeightFactorization {
        u: u.cast(),
        sigma: sigma.into_iter().map(T::from_f64).collect(),
        v: v.cast(),
        sweeps,
    })
}

type Svd = (Matrix<f64>, Vec<f64>, Matrix<f64>, usize);

/// SVD of an `m × n` matrix with `m ≥ n`; returns `U: m×n`, `σ`, `V: n×n`.
fn svd_tall(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    if n == 0 {
        return Ok((Matrix::zeros(m, 0), Vec::new(), Matrix::zeros(0, 0), 0));
    }
    if m > n {
        let (q, r) = householder_qr(a);
        let (u_r, sigma, v, sweeps) = jacobi(&r)?;
        let u = q.matmul(&u_r)?;
        Ok((u, sigma, v, sweeps))
    } else {
        jacobi(a)
    }
}

/// Thin Householder QR: `A = Q·R`, `Q: m×n` with orthonormal columns.
fn householder_qr(a: &Matrix<f64>) -> (Matrix<f64>, Matrix<f64>) {
    let (m, n) = (a.rows(), a.cols());
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let norm: f64 = (j..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (j..m).map(|i| r[(i, j)]).collect();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for col in j..n {
            let dot: f64 = (j..m).map(|i| v[i - j] * r[(i, col)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                r[(i, col)] -= f * v[i - j];
            }
        }
        for x in v.iter_mut() {
            *x /= vnorm2.sqrt();
        }
        reflectors.push(v);
    }
    // Q = H_0 · H_1 ⋯ H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..n).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for col in 0..n {
            let dot: f64 = (j..m).map(|i| v[i - j] * q[(i, col)]).sum();
            for i in j..m {
                q[(i, col)] -= 2.0 * dot * v[i - j];
            }
        }
    }
    let r_square = Matrix::from_fn(n, n, |i, j| if i <= j { r[(i, j)] } else { 0.0 });
    (q, r_square)
}

/// One-sided Jacobi on a square or tall matrix.
fn jacobi(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    // Columns stored contiguously.
    let mut cols = a.transpose();
    let mut v = Matrix::<f64>::identity(n);
    // Rotations preserve the Frobenius norm. Columns below roundoff level
    // carry no direction, and their cosines with other columns are noise.
    let frob2: f64 = a.data().iter().map(|x| x * x).sum();
    let floor = frob2 * (f64::EPSILON * m.max(n) as f64).powi(2);
    let mut sweeps = 0;
    loop {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = cols.row(p);
                    let cq = cols.row(q);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (&x, &y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                let scale = (alpha * beta).sqrt();
                if alpha <= floor || beta <= floor || gamma == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / scale;
                off = off.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(cols.data_mut(), m, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        if off <= JACOBI_TOL {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::NonConvergence {
                sweeps,
                residual: off,
            });
        }
    }

    let sigma: Vec<f64> = (0..n)
        .map(|j| cols.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let negligible = sigma_max * f64::EPSILON * (m.max(n) as f64);
    let mut u = Matrix::<f64>::zeros(m, n);
    let mut deficient = Vec::new();
    for j in 0..n {
        if sigma[j] > negligible && sigma[j] > 0.0 {
            for i in 0..m {
                u[(i, j)] = cols[(j, i)] / sigma[j];
            }
        } else {
            deficient.push(j);
        }
    }
    complete_basis(&mut u, &deficient);
    Ok((u, sigma, v, sweeps))
}

fn rotate_rows(data: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = data.split_at_mut(q * len);
    let rp = &mut head[p * len..(p + 1) * len];
    let rq = &mut tail[..len];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn rotate_columns(v: &mut Matrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..v.rows() {
        let (a, b) = (v[(i, p)], v[(i, q)]);
        v[(i, p)] = c * a - s * b;
        v[(i, q)] = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column, drawing candidates from the standard basis in order.
fn complete_basis(u: &mut Matrix<f64>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < m {
            let mut x = vec![0.0; m];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..m).map(|i| u[(i, f)] * x[i]).sum();
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi -= dot * u[(i, f)];
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, xi) in x.iter().enumerate() {
                    u[(i, j)] = xi / norm;
                }
                filled.push(j);
                break;
            }
        }
    }
}

/// Sorts by descending σ (stable on the original index) and fixes signs so
/// that the largest-magnitude entry of each U column is non-negative.
fn canonicalize(u: Matrix<f64>, sigma: Vec<f64>, v: Matrix<f64>) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut u = u.select_columns(&order);
    let mut v = v.select_columns(&order);
    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    for j in 0..sigma.len() {
        let mut pivot = 0.0f64;
        for i in 0..u.rows() {
            if u[(i, j)].abs() > pivot.abs() {
                pivot = u[(i, j)];
            }
        }
        if pivot < 0.0 {
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
    (u, sigma, v)
}

/// Residuals of the covariance and projection identities
/// `WᵀW = V·Σ²·Vᵀ` and `W·V = U·Σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaDiagnostics {
    pub covariance_residual: f64,
    pub projection_residual: f64,
    pub tolerance: f64,
}

impl PcaDiagnostics {
    pub fn passes(&self) -> bool {
        self.covariance_residual <= self.tolerance && self.projection_residual <= self.tolerance
    }
}

pub fn pca_identities_check<T: Scalar>(w: &Matrix<T>, f: &WeightFactorization<T>) -> PcaDiagnostics {
    let w: Matrix<f64> = w.cast();
    let u: Matrix<f64> = f.u.cast();
    let v: Matrix<f64> = f.v.cast();
    let sigma: Vec<f64> = f.sigma.iter().map(|s| s.as_f64()).collect();
    let sigma2: Vec<f64> = sigma.iter().map(|s| s * s).collect();

    let cov = w.transpose().matmul(&w).expect("WᵀW");
    let cov_svd = v
        .scale_columns(&sigma2)
        .matmul(&v.transpose())
        .expect("VΣ²Vᵀ");
    let proj = w.matmul(&v).expect("WV");
    let proj_svd = u.scale_columns(&sigma);

    PcaDiagnostics {
        covariance_residual: cov.max_abs_diff(&cov_svd),
        projection_residual: proj.max_abs_diff(&proj_svd),
        tolerance: 1e-4 * w.frobenius_norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn low_rank_converges() {
        let a = random(7, 2, 3);
        let b = random(2, 6, 4);
        let w = Matrix::from_fn(7, 6, |i, j| (0..2).map(|t| a[(i, t)] * b[(t, j)]).sum::<f64>());
        let f = compact_svd(&w).unwrap();
        assert!(f.sigma[2..].iter().all(|&s| s < 1e-12 * f.sigma[0]));
        assert!(f.reconstruct().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let f = compact_svd(&Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0]);
        let uvt = f.u.matmul(&f.v.transpose()).unwrap();
        assert!(uvt.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn diagonal_sigma_sorted() {
        let w = Matrix::<f64>::diag(&[1.0, 3.0]);
        let f = compact_svd(&w).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-14);
        assert!((f.sigma[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wide_matrix_uses_transpose() {
        let w = random(3, 7, 11);
        let f = compact_svd(&w).unwrap();
        assert_eq!(f.u.rows(), 3);
        assert_eq!(f.u.cols(), 3);
        assert_eq!(f.v.rows(), 7);
        assert!(f.reconstruct().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn zero_matrix_is_exact() {
        let w = Matrix::<f32>::zeros(6, 4);
        let f = compact_svd(&w).unwrap();
        assert!(f.sigma.iter().all(|&s| s == 0.0));
        let d = pca_identities_check(&w, &f);
        assert_eq!(d.covariance_residual, 0.0);
        assert_eq!(d.projection_residual, 0.0);
        let (ru, rv) = f.orthonormality_residuals();
        assert!(ru < 1e-6 && rv < 1e-6);
    }

    #[test]
    fn signs_are_canonical() {
        let f = compact_svd(&random(10, 4, 3)).unwrap();
        for j in 0..4 {
            let col = f.u.column(j);
            let pivot = col.iter().cloned().fold(0.0f64, |p, x| if x.abs() > p.abs() { x } else { p });
            assert!(pivot >= 0.0);
        }
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::<f32>::from_fn(&[3, 3, 4, 8], |i| i as f32 * 0.1);
        let m = reshape_weights(&t).unwrap();
        assert_eq!((m.rows(), m.cols()), (36, 8));
        assert_eq!(unreshape_weights(&m, 3, 3, 4).unwrap(), t);

        let row = Tensor::<f32>::new(vec![1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let m = reshape_weights(&row).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 5));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
