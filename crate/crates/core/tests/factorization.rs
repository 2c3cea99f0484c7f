//! Compact SVD on seeded random kernels, checked against an independent
//! symmetric eigen-solver.

use bsprune::factorization::{compact_svd, pca_identities_check, reshape_weights, unreshape_weights};
use bsprune::linalg::Matrix;
use bsprune::tensor::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SHAPES: [(usize, usize); 4] = [(27, 16), (576, 64), (64, 576), (1, 8)];

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

fn eigen_sigma(w: &Matrix<f32>) -> Vec<f64> {
    let m = DMatrix::from_fn(w.rows(), w.cols(), |i, j| w.row(i)[j] as f64);
    let gram = if m.nrows() >= m.ncols() { m.transpose() * &m } else { &m * m.transpose() };
    let mut ev: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|&v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn hundred_random_kernels_satisfy_every_invariant() {
    for i in 0..100u64 {
        let (k, co) = SHAPES[i as usize % 4];
        let w = random_matrix(k, co, 1000 + i);
        let f = compact_svd(&w).unwrap();
        let norm = w.frobenius_norm();
        assert_eq!(f.rank(), k.min(co));

        let recon = w.cast::<f64>().max_abs_diff(&f.reconstruct().cast::<f64>());
        let recon_f = {
            let d: Matrix<f64> = f.reconstruct().cast();
            let w64: Matrix<f64> = w.cast();
            d.data().iter().zip(w64.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        assert!(recon_f <= 1e-5 * norm, "{k}x{co} seed {i}: reconstruction {recon_f} (max {recon})");

        let (ou, ov) = f.orthonormality_residuals();
        assert!(ou <= 1e-5 && ov <= 1e-5, "{k}x{co}: orthonormality {ou} {ov}");

        assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        assert!(f.sigma.iter().all(|&s| s >= 0.0));

        let pca = pca_identities_check(&w, &f);
        assert!(pca.passes(), "{k}x{co}: {pca:?}");
        assert!(pca.covariance_residual <= 1e-4 * norm && pca.projection_residual <= 1e-4 * norm);

        let oracle = eigen_sigma(&w);
        let smax = oracle[0];
        for (s, o) in f.sigma.iter().zip(&oracle) {
            assert!((*s as f64 - o).abs() <= 1e-4 * smax.max(*o), "{k}x{co}: sigma {s} vs {o}");
        }
    }
}

#[test]
fn scaled_vt_rows_have_singular_value_norms() {
    let w = random_matrix(27, 16, 7);
    let f = compact_svd(&w).unwrap();
    let vt = f.scaled_vt();
    for (i, &s) in f.sigma.iter().enumerate() {
        let n: f64 = vt.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - s as f64).abs() <= 1e-5 * s as f64);
    }
}

#[test]
fn duplicated_columns_give_a_null_direction() {
    let base = random_matrix(27, 8, 8);
    let w = Matrix::from_fn(27, 9, |i, j| base.row(i)[j.min(7)]);
    let f = compact_svd(&w).unwrap();
    let smax = f.sigma[0];
    assert!(*f.sigma.last().unwrap() <= 1e-6 * smax);
    let recon: Matrix<f64> = f.reconstruct().cast();
    let w64: Matrix<f64> = w.cast();
    assert!(recon.max_abs_diff(&w64) <= 1e-5 * w.frobenius_norm());
}

#[test]
fn factorization_is_deterministic() {
    let w = random_matrix(64, 576, 9);
    assert_eq!(compact_svd(&w).unwrap(), compact_svd(&w).unwrap());
}

#[test]
fn zero_matrix_has_exact_identities() {
    let w = Matrix::<f32>::zeros(6, 4);
    let f = compact_svd(&w).unwrap();
    let pca = pca_identities_check(&w, &f);
    assert_eq!((pca.covariance_residual, pca.projection_residual), (0.0, 0.0));
}

#[test]
fn kernel_reshape_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f32> = (0..3 * 3 * 4 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
    let k = Tensor::new(vec![3, 3, 4, 8], data).unwrap();
    let m = reshape_weights(&k).unwrap();
    assert_eq!((m.rows(), m.cols()), (36, 8));
    assert_eq!(unreshape_weights(&m, 3, 3, 4).unwrap(), k);
}
