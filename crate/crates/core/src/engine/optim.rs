//! SGD with momentum and the cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MOMENTUM: f64 = 0.9;
pub const LR_MIN: f64 = 1e-4;
pub const LR_MAX: f64 = 1e-1;

/// One momentum step: `v ← μ·v − lr·g`, `p ← p + v`, then clamp to zero
/// from below when `non_negative` is set.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    non_negative: bool,
) {
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p += *v;
        if non_negative && *p < T::zero() {
            *p = T::zero();
        }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(step: usize, total: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs T > 0".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule step {step} beyond T = {total}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}
