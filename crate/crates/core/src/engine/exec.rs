//! Graph evaluation with a tape of intermediate values, and the matching
//! reverse pass.
//!
//! Gradients are produced only for trainable parameters (scaling factors,
//! batch-norm affine terms, the dense classifier). They flow through frozen
//! convolutions but are never materialized for them.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, BnCache, Mode};
use crate::decomposition::basis_scaling_forward;
use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Layer, NetGraph, NodeId, ParamKind, ParamRef};
use crate::linalg::{gemm_at, gemm_bt};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Cache<T: Scalar> {
    None,
    Bn(BnCache<T>),
    ArgMax(Vec<usize>),
    /// Dropout keep-mask applied to a dense layer's input.
    Dropout(Vec<bool>),
}

/// Activations and per-node caches from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f32> {
    mode: Mode,
    acts: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    output: NodeId,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self {
            mode: Mode::Infer,
            acts: Vec::new(),
            caches: Vec::new(),
            output: 0,
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn is_recorded(&self) -> bool {
        !self.acts.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Network output (logits).
    pub fn logits(&self) -> &Tensor<T> {
        &self.acts[self.output]
    }

    pub fn activation(&self, id: NodeId) -> &Tensor<T> {
        &self.acts[id]
    }

    pub fn into_logits(mut self) -> Tensor<T> {
        self.acts.swap_remove(self.output)
    }
}

/// Dropout on the input of dense layers, training mode only.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub fn forward<T: Scalar>(g: &NetGraph<T>, x: &Tensor<T>, mode: Mode) -> Result<Tape<T>> {
    forward_with(g, x, mode, None)
}

/// Evaluates every node. In inference mode, a non-zero dropout rate is
/// applied as a `1 − rate` scaling of dense inputs.
pub fn forward_with<T: Scalar>(
    g: &NetGraph<T>,
    x: &Tensor<T>,
    mode: Mode,
    dropout: Option<Dropout<'_>>,
) -> Result<Tape<T>> {
    forward_impl(g, x, mode, dropout, g.len() - 1, g.output())
}

/// Evaluates nodes `0..=upto` only; the tape's output is `upto`. Such a
/// tape cannot be used for a backward pass.
pub fn forward_prefix<T: Scalar>(g: &NetGraph<T>, x: &Tensor<T>, upto: NodeId) -> Result<Tape<T>> {
    if upto >= g.len() {
        return Err(Error::InvalidArgument(format!("node {upto} out of range")));
    }
    forward_impl(g, x, Mode::Infer, None, upto, upto)
}

fn forward_impl<T: Scalar>(
    g: &NetGraph<T>,
    x: &Tensor<T>,
    mode: Mode,
    dropout: Option<Dropout<'_>>,
    last: NodeId,
    output: NodeId,
) -> Result<Tape<T>> {
    let (h, w, c) = g.input_extent();
    if x.rank() != 4 || x.shape()[1..] != [h, w, c] {
        return Err(shape_mismatch("forward input", x.shape(), &[0, h, w, c]));
    }
    let mut dropout = dropout;
    let mut acts: Vec<Tensor<T>> = Vec::with_capacity(g.len());
    let mut caches = Vec::with_capacity(g.len());
    for n in &g.nodes()[..=last] {
        let input = |k: usize| &acts[n.inputs[k]];
        let mut cache = Cache::None;
        let y = match &n.layer {
            Layer::Input { .. } => x.clone(),
            Layer::Conv(conv) => {
                let kernel = conv
                    .kernel
                    .as_ref()
                    .ok_or_else(|| Error::Unmaterialized(n.name.clone()))?;
                ops::conv2d_forward(input(0), kernel, conv.bias.as_deref(), conv.stride, conv.padding)?
            }
            Layer::BasisScalingConv(b) => basis_scaling_forward(input(0), b)
                .map_err(|e| match e {
                    Error::Unmaterialized(_) => Error::Unmaterialized(n.name.clone()),
                    other => other,
                })?,
            Layer::BatchNorm(bn) => match mode {
                Mode::Train => {
                    let (y, c) = ops::batchnorm_train(input(0), &bn.gamma, &bn.beta, bn.eps)?;
                    cache = Cache::Bn(c);
                    y
                }
                Mode::Infer => ops::batchnorm_infer(
                    input(0),
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    bn.eps,
                )?,
            },
            Layer::Relu => ops::relu(input(0)),
            Layer::Pool {
                kind,
                size,
                stride,
                padding,
            } => {
                let out = ops::pool_forward(input(0), *kind, *size, *stride, *padding)?;
                cache = Cache::ArgMax(out.argmax);
                out.y
            }
            Layer::GlobalAvgPool => ops::global_avg_pool(input(0))?,
            Layer::Add => {
                let mut sum = input(0).clone();
                for k in 1..n.inputs.len() {
                    let other = input(k);
                    if other.shape() != sum.shape() {
                        return Err(shape_mismatch("add", sum.shape(), other.shape()));
                    }
                    for (s, &v) in sum.data_mut().iter_mut().zip(other.data()) {
                        *s += v;
                    }
                }
                sum
            }
            Layer::Concat => {
                let parts: Vec<&Tensor<T>> = n.inputs.iter().map(|&i| &acts[i]).collect();
                Tensor::concat_last_axis(&parts)?
            }
            Layer::Dense(d) => {
                let x_in = input(0);
                match (&mut dropout, mode) {
                    (Some(drop), Mode::Train) if drop.rate > 0.0 => {
                        let keep: Vec<bool> = (0..x_in.len())
                            .map(|_| drop.rng.random::<f64>() >= drop.rate)
                            .collect();
                        let masked = Tensor::new(
                            x_in.shape().to_vec(),
                            x_in.data()
                                .iter()
                                .zip(&keep)
                                .map(|(&v, &k)| if k { v } else { T::zero() })
                                .collect(),
                        )?;
                        let y = ops::dense_forward(&masked, &d.weight, &d.bias)?;
                        cache = Cache::Dropout(keep);
                        y
                    }
                    (Some(drop), Mode::Infer) if drop.rate > 0.0 => {
                        let keep = T::from_f64(1.0 - drop.rate);
                        ops::dense_forward(&x_in.map(|v| v * keep), &d.weight, &d.bias)?
                    }
                    _ => ops::dense_forward(x_in, &d.weight, &d.bias)?,
                }
            }
        };
        acts.push(y);
        caches.push(cache);
    }
    if !acts[output].all_finite() {
        return Err(Error::NonFinite("forward pass".into()));
    }
    Ok(Tape {
        mode,
        acts,
        caches,
        output,
    })
}

/// Folds the batch statistics of a training-mode tape into every
/// batch-norm's running averages.
pub fn apply_batch_stats<T: Scalar>(g: &mut NetGraph<T>, tape: &Tape<T>) {
    for (id, cache) in tape.caches.iter().enumerate() {
        if let Cache::Bn(c) = cache {
            if let Layer::BatchNorm(bn) = g.layer_mut(id) {
                bn.update_running(&c.batch_mean, &c.batch_var);
            }
        }
    }
}

/// Parameter gradients, plus any captured activation gradients.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar = f32> {
    pub params: BTreeMap<ParamRef, Vec<T>>,
    pub activations: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, p: ParamRef) -> Option<&[T]> {
        self.params.get(&p).map(Vec::as_slice)
    }
}

pub fn backward<T: Scalar>(g: &NetGraph<T>, tape: &Tape<T>, d_output: &Tensor<T>) -> Result<Gradients<T>> {
    backward_capture(g, tape, d_output, &[])
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Reverse pass from `d_output` (gradient of the loss with respect to the
/// graph output). Gradients with respect to the outputs of the nodes in
/// `capture` are returned as well.
pub fn backward_capture<T: Scalar>(
    g: &NetGraph<T>,
    tape: &Tape<T>,
    d_output: &Tensor<T>,
    capture: &[NodeId],
) -> Result<Gradients<T>> {
    if !tape.is_recorded() {
        return Err(Error::NoForwardPass);
    }
    if tape.acts.len() != g.len() {
        return Err(Error::InvalidArgument(
            "tape was recorded on a different graph".into(),
        ));
    }
    if d_output.shape() != tape.logits().shape() {
        return Err(shape_mismatch("backward", d_output.shape(), tape.logits().shape()));
    }

    let trainable: Vec<ParamRef> = g.trainable_params();
    let mut has_params = vec![false; g.len()];
    for p in &trainable {
        has_params[p.node] = true;
    }
    let mut wants = vec![false; g.len()];
    for (id, n) in g.nodes().iter().enumerate() {
        wants[id] = has_params[id] || capture.contains(&id) || n.inputs.iter().any(|&i| wants[i]);
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; g.len()];
    grads[g.output()] = Some(d_output.clone());
    let mut out = Gradients::default();

    for id in (0..g.len()).rev() {
        let Some(dy) = grads[id].take() else {
            continue;
        };
        let n = g.node(id);
        let act_in = |k: usize| tape.activation(n.inputs[k]);
        let wants_in = |k: usize| wants[n.inputs[k]];
        if capture.contains(&id) {
            out.activations.insert(id, dy.clone());
        }
        match &n.layer {
            Layer::Input { .. } => {}
            Layer::Conv(conv) => {
                if wants_in(0) {
                    let kernel = conv
                        .kernel
                        .as_ref()
                        .ok_or_else(|| Error::Unmaterialized(n.name.clone()))?;
                    let dx = ops::conv2d_backward_input(
                        &dy,
                        act_in(0).shape(),
                        kernel,
                        conv.stride,
                        conv.padding,
                    )?;
                    accumulate(&mut grads[n.inputs[0]], dx);
                }
            }
            Layer::BasisScalingConv(b) => {
                let vt = b
                    .vbar_t
                    .as_ref()
                    .ok_or_else(|| Error::Unmaterialized(n.name.clone()))?;
                let z = act_in(0);
                let rows = z.len() / b.rank.max(1);
                let mut dzs = vec![T::zero(); rows * b.rank];
                gemm_bt(dy.data(), vt.data(), &mut dzs, rows, b.c_out, b.rank);
                if has_params[id] {
                    let mut ds = vec![0.0f64; b.rank];
                    for (zr, dr) in z.data().chunks_exact(b.rank).zip(dzs.chunks_exact(b.rank)) {
                        for i in 0..b.rank {
                            ds[i] += zr[i].as_f64() * dr[i].as_f64();
                        }
                    }
                    out.params.insert(
                        ParamRef {
                            node: id,
                            kind: ParamKind::Scale,
                        },
                        ds.into_iter().map(T::from_f64).collect(),
                    );
                }
                if wants_in(0) {
                    for row in dzs.chunks_exact_mut(b.rank) {
                        for (d, &s) in row.iter_mut().zip(&b.scale) {
                            *d *= s;
                        }
                    }
                    accumulate(&mut grads[n.inputs[0]], Tensor::new(z.shape().to_vec(), dzs)?);
                }
            }
            Layer::BatchNorm(bn) => {
                let (dx, dgamma, dbeta) = match (&tape.caches[id], tape.mode) {
                    (Cache::Bn(cache), Mode::Train) => ops::batchnorm_train_backward(&dy, &bn.gamma, cache),
                    _ => ops::batchnorm_infer_backward(
                        &dy,
                        act_in(0),
                        &bn.gamma,
                        &bn.running_mean,
                        &bn.running_var,
                        bn.eps,
                    ),
                };
                if has_params[id] {
                    out.params.insert(
                        ParamRef {
                            node: id,
                            kind: ParamKind::Gamma,
                        },
                        dgamma,
                    );
                    out.params.insert(
                        ParamRef {
                            node: id,
                            kind: ParamKind::Beta,
                        },
                        dbeta,
                    );
                }
                if wants_in(0) {
                    accumulate(&mut grads[n.inputs[0]], dx);
                }
            }
            Layer::Relu => {
                if wants_in(0) {
                    accumulate(&mut grads[n.inputs[0]], ops::relu_backward(&dy, tape.activation(id)));
                }
            }
            Layer::Pool {
                kind,
                size,
                stride,
                padding,
            } => {
                if wants_in(0) {
                    let argmax = match &tape.caches[id] {
                        Cache::ArgMax(a) => a.as_slice(),
                        _ => &[],
                    };
                    let dx = ops::pool_backward(&dy, act_in(0).shape(), *kind, *size, *stride, *padding, argmax)?;
                    accumulate(&mut grads[n.inputs[0]], dx);
                }
            }
            Layer::GlobalAvgPool => {
                if wants_in(0) {
                    accumulate(
                        &mut grads[n.inputs[0]],
                        ops::global_avg_pool_backward(&dy, act_in(0).shape()),
                    );
                }
            }
            Layer::Add => {
                for (k, &i) in n.inputs.iter().enumerate() {
                    if wants_in(k) {
                        accumulate(&mut grads[i], dy.clone());
                    }
                }
            }
            Layer::Concat => {
                let mut offset = 0;
                for (k, &i) in n.inputs.iter().enumerate() {
                    let c = act_in(k).channels();
                    if wants_in(k) {
                        let keep: Vec<usize> = (offset..offset + c).collect();
                        accumulate(&mut grads[i], dy.select_last_axis(&keep));
                    }
                    offset += c;
                }
            }
            Layer::Dense(d) => {
                let x_in = act_in(0);
                let mask = match &tape.caches[id] {
                    Cache::Dropout(m) => Some(m.as_slice()),
                    _ => None,
                };
                let (b, i_dim, o_dim) = (x_in.shape()[0], d.inputs(), d.outputs());
                if has_params[id] {
                    let x_eff: Vec<T> = match mask {
                        Some(m) => x_in
                            .data()
                            .iter()
                            .zip(m)
                            .map(|(&v, &k)| if k { v } else { T::zero() })
                            .collect(),
                        None => x_in.data().to_vec(),
                    };
                    let mut dw = vec![T::zero(); i_dim * o_dim];
                    gemm_at(&x_eff, dy.data(), &mut dw, b, i_dim, o_dim);
                    let mut db = vec![0.0f64; o_dim];
                    for row in dy.data().chunks_exact(o_dim) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    out.params.insert(
                        ParamRef {
                            node: id,
                            kind: ParamKind::DenseWeight,
                        },
                        dw,
                    );
                    out.params.insert(
                        ParamRef {
                            node: id,
                            kind: ParamKind::DenseBias,
                        },
                        db.into_iter().map(T::from_f64).collect(),
                    );
                }
                if wants_in(0) {
                    let mut dx = vec![T::zero(); b * i_dim];
                    // dx = dy · Wᵀ; W is [in, out] so each row of W pairs with dy's row.
                    gemm_bt(dy.data(), d.weight.data(), &mut dx, b, o_dim, i_dim);
                    if let Some(m) = mask {
                        for (v, &k) in dx.iter_mut().zip(m) {
                            if !k {
                                *v = T::zero();
                            }
                        }
                    }
                    accumulate(&mut grads[n.inputs[0]], Tensor::new(x_in.shape().to_vec(), dx)?);
                }
            }
        }
    }
    for p in trainable {
        out.params.entry(p).or_insert_with(|| vec![T::zero(); g.param(p).map(|s| s.len()).unwrap_or(0)]);
    }
    Ok(out)
}

/// Mean cross-entropy of `labels` under the network, with the tape and the
/// parameter (and captured activation) gradients.
pub fn loss_and_gradients<T: Scalar>(
    g: &NetGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    capture: &[NodeId],
) -> Result<(f64, Tape<T>, Gradients<T>)> {
    let tape = forward(g, x, mode)?;
    let (loss, dlogits) = ops::softmax_cross_entropy(tape.logits(), labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = backward_capture(g, &tape, &dlogits, capture)?;
    Ok((loss, tape, grads))
}
