#![allow(dead_code)]

use bsprune::graph::{build_template, replace_head, Layer, NetGraph, Template, WeightInit};
use bsprune::tensor::Tensor;
use bsprune::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY: [Template; 3] = [Template::TinyVgg, Template::TinyResNet, Template::TinyDenseNet];

/// A tiny template with a fresh head and perturbed batch-norms, so that
/// normalization is not the identity.
pub fn tiny<T: Scalar>(t: Template, classes: usize, seed: u64) -> NetGraph<T> {
    let g: NetGraph<T> = build_template(t, [8, 8, 1], classes, WeightInit::HeNormal { seed }).unwrap();
    let mut g = replace_head(&g, classes, seed).unwrap();
    perturb_bn(&mut g, seed);
    g
}

pub fn perturb_bn<T: Scalar>(g: &mut NetGraph<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b0);
    for id in 0..g.len() {
        if let Layer::BatchNorm(bn) = g.layer_mut(id) {
            for j in 0..bn.channels() {
                bn.gamma[j] = T::from_f64(rng.random_range(0.5..1.5));
                bn.beta[j] = T::from_f64(rng.random_range(-0.3..0.3));
                bn.running_mean[j] = T::from_f64(rng.random_range(-0.2..0.2));
                bn.running_var[j] = T::from_f64(rng.random_range(0.5..2.0));
            }
        }
    }
}

pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Sets every scaling vector entry through `f(layer name, index)`.
pub fn set_scales<T: Scalar>(g: &mut NetGraph<T>, mut f: impl FnMut(&str, usize) -> f64) {
    for id in 0..g.len() {
        let name = g.node(id).name.clone();
        if let Layer::BasisScalingConv(b) = g.layer_mut(id) {
            for (i, s) in b.scale.iter_mut().enumerate() {
                *s = T::from_f64(f(&name, i));
            }
        }
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}
