mod common;

use bsprune::data::Batch;
use bsprune::decomposition::decompose_all;
use bsprune::engine::{loss_and_gradients, Mode};
use bsprune::graph::{Layer, NetGraph, ParamKind, ParamRef, Template};
use bsprune::importance::{
    compute_scores, global_threshold, hrank_scores, l1_scores, numerical_rank, scored_layers, taylor_fo_scores,
    ImportanceTable, Method, Target,
};
use bsprune::linalg::Matrix;
use common::{random_tensor, tiny, TINY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batches(n: usize, classes: usize, seed: u64) -> Vec<Batch<f64>> {
    (0..n as u64)
        .map(|i| Batch {
            x: random_tensor(&[4, 8, 8, 1], seed + i),
            labels: (0..4).map(|j| (j + i as usize) % classes).collect(),
        })
        .collect()
}

#[test]
fn l1_is_the_absolute_kernel_slice_sum() {
    let g: NetGraph<f64> = tiny(Template::TinyVgg, 3, 1);
    let table = l1_scores(&g).unwrap();
    for id in scored_layers(&g, Target::Channel) {
        let Layer::Conv(c) = &g.node(id).layer else { continue };
        let k = c.kernel.as_ref().unwrap().data();
        let scores = &table.layer(&g.node(id).name).unwrap().raw;
        for (j, s) in scores.iter().enumerate() {
            let mut oracle = 0.0;
            for a in 0..c.kh {
                for b in 0..c.kw {
                    for i in 0..c.c_in {
                        oracle += k[((a * c.kw + b) * c.c_in + i) * c.c_out + j].abs();
                    }
                }
            }
            assert!((s - oracle).abs() < 1e-12, "{} {j}", g.node(id).name);
        }
    }
}

/// Rank by Gaussian elimination with partial pivoting.
fn elimination_rank(m: &Matrix<f64>) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| m.data()[i * cols + j]).collect()).collect();
    let tol = 1e-9 * a.iter().flatten().fold(0.0f64, |x, v| x.max(v.abs()));
    let mut rank = 0;
    for col in 0..cols {
        let Some(p) = (rank..rows).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())) else { break };
        if a[p][col].abs() <= tol {
            continue;
        }
        a.swap(rank, p);
        let (top, rest) = a.split_at_mut(rank + 1);
        let pivot = &top[rank];
        for row in rest {
            let f = row[col] / pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn numerical_rank_matches_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let r = rng.random_range(0..=h.min(w));
        let a = Matrix::from_fn(h, r, |_, _| rng.random_range(-3i32..=3) as f64);
        let b = Matrix::from_fn(r, w, |_, _| rng.random_range(-3i32..=3) as f64);
        let m = Matrix::from_fn(h, w, |i, j| (0..r).map(|t| a.data()[i * r + t] * b.data()[t * w + j]).sum());
        assert_eq!(numerical_rank(&m).unwrap(), elimination_rank(&m), "{h}x{w} rank<={r}");
    }
}

#[test]
fn hrank_scores_are_bounded_by_map_extent() {
    for t in TINY {
        let g: NetGraph<f64> = tiny(t, 3, 2);
        let table = hrank_scores(&g, &batches(2, 3, 40)).unwrap();
        for l in &table.layers {
            let id = g.find(&l.layer).unwrap();
            let s = g.shape(id);
            let d = s.dims();
            let bound = d[0].min(d[1]) as f64;
            assert!(l.raw.iter().all(|&v| (0.0..=bound).contains(&v)), "{}", l.layer);
        }
    }
}

#[test]
fn basis_taylor_matches_per_batch_oracle() {
    let mut g: NetGraph<f64> = decompose_all(&tiny(Template::TinyResNet, 3, 3), 1.0).unwrap();
    common::set_scales(&mut g, |_, i| 0.5 + 0.1 * (i % 7) as f64);
    let data = batches(3, 3, 50);
    let table = taylor_fo_scores(&g, &data, Target::Basis).unwrap();
    for id in scored_layers(&g, Target::Basis) {
        let p = ParamRef { node: id, kind: ParamKind::Scale };
        let s = g.param(p).unwrap().to_vec();
        let mut oracle = vec![0.0; s.len()];
        for b in &data {
            let (_, _, grads) = loss_and_gradients(&g, &b.x, &b.labels, Mode::Infer, &[]).unwrap();
            for (o, (gi, si)) in oracle.iter_mut().zip(grads.get(p).unwrap().iter().zip(&s)) {
                *o += (gi * si).powi(2) / data.len() as f64;
            }
        }
        let got = &table.layer(&g.node(id).name).unwrap().raw;
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-30), "{a} vs {b}");
        }
    }
}

#[test]
fn channel_taylor_uses_gamma_behind_batch_norm() {
    let g: NetGraph<f64> = tiny(Template::TinyVgg, 3, 4);
    let data = batches(2, 3, 60);
    let table = taylor_fo_scores(&g, &data, Target::Channel).unwrap();
    let consumers = g.consumers();
    let mut checked = 0;
    for id in scored_layers(&g, Target::Channel) {
        let [bn] = consumers[id].as_slice() else { continue };
        if !matches!(g.node(*bn).layer, Layer::BatchNorm(_)) {
            continue;
        }
        let p = ParamRef { node: *bn, kind: ParamKind::Gamma };
        let gamma = g.param(p).unwrap();
        let mut oracle = vec![0.0; gamma.len()];
        for b in &data {
            let (_, _, grads) = loss_and_gradients(&g, &b.x, &b.labels, Mode::Infer, &[]).unwrap();
            for (o, (d, v)) in oracle.iter_mut().zip(grads.get(p).unwrap().iter().zip(gamma)) {
                *o += (d * v).powi(2) / 2.0;
            }
        }
        let got = &table.layer(&g.node(id).name).unwrap().raw;
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-30));
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn a_silent_head_gives_zero_taylor_scores() {
    for t in TINY {
        let mut g: NetGraph<f64> = decompose_all(&tiny(t, 3, 5), 1.0).unwrap();
        let head = g.len() - 1;
        let Layer::Dense(d) = g.layer_mut(head) else { panic!() };
        d.weight = bsprune::tensor::Tensor::zeros(d.weight.shape());
        for target in [Target::Basis, Target::Channel] {
            let table = taylor_fo_scores(&g, &batches(2, 3, 70), target).unwrap();
            assert!(table.layers.iter().flat_map(|l| &l.raw).all(|&v| v == 0.0), "{t:?} {target:?}");
            assert!(table.layers.iter().flat_map(|l| &l.normalized).all(|&v| v == 0.0));
        }
    }
}

#[test]
fn normalized_scores_peak_at_one() {
    let g: NetGraph<f64> = decompose_all(&tiny(Template::TinyDenseNet, 3, 6), 1.0).unwrap();
    for m in [Method::TaylorFo, Method::Singular, Method::Random { seed: 1 }, Method::Reverse] {
        let table = compute_scores(&g, m, Target::Basis, &batches(2, 3, 80)).unwrap();
        for l in &table.layers {
            let max = l.normalized.iter().copied().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12, "{m} {}", l.layer);
        }
    }
    assert!(compute_scores(&g, Method::L1, Target::Basis, &[]).is_err());
}

#[test]
fn threshold_removes_the_requested_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let raw: Vec<(String, Vec<f64>)> = (0..10)
        .map(|i| (format!("l{i}"), (0..100).map(|_| rng.random::<f64>()).collect()))
        .collect();
    let table = ImportanceTable::from_raw(Method::TaylorFo, Target::Basis, raw);
    let th = global_threshold(&table, 0.37).unwrap();
    let mut pooled: Vec<f64> = table.layers.iter().flat_map(|l| l.normalized.clone()).collect();
    pooled.sort_by(f64::total_cmp);
    assert_eq!(th, pooled[370]);
    assert_eq!(pooled.iter().filter(|&&v| v < th).count(), 370);
    assert_eq!(global_threshold(&table, 0.0).unwrap(), f64::NEG_INFINITY);
    assert!(global_threshold(&table, 1.0).is_err());
}
