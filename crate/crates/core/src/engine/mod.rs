//! Deterministic tensor math: layer kernels, a recorded forward pass over a
//! [`NetGraph`](crate::graph::NetGraph), gradients for the trainable
//! parameters, and the optimizer.

pub mod exec;
pub mod ops;
pub mod optim;

pub use exec::{
    apply_batch_stats, backward, backward_capture, forward, forward_prefix, forward_with, loss_and_gradients, Dropout,
    Gradients, Tape,
};
pub use ops::{Mode, Padding, PoolKind};
pub use optim::{cosine_lr, sgd_step, LR_MAX, LR_MIN, MOMENTUM};
