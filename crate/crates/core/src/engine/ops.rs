//! Forward and input-gradient kernels for the layer types of a prunable
//! network. Activations are NHWC.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{gemm, gemm_bt};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis, or `None` when the
/// window does not fit.
pub fn output_extent(input: usize, window: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < window {
                None
            } else {
                Some(((input - window) / stride + 1, 0))
            }
        }
    }
}

/// Resolved geometry of a 2-D sliding-window op over an NHWC batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn resolve(
        op: &'static str,
        input: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "{op} expects an NHWC tensor, got shape {input:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        let underflow = || Error::SpatialUnderflow {
            op,
            input: input.to_vec(),
            window: vec![kh, kw],
        };
        let (oh, pad_top) = output_extent(input[1], kh, stride, padding).ok_or_else(underflow)?;
        let (ow, pad_left) = output_extent(input[2], kw, stride, padding).ok_or_else(underflow)?;
        Ok(Self {
            batch: input[0],
            h: input[1],
            w: input[2],
            c: input[3],
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    #[inline]
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Source coordinate for output index `o` and window offset `k`, if
    /// it falls inside the input.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Unfolds patches into rows of a `[b·oh·ow, kh·kw·c]` matrix; the column
/// index enumerates `(kh, kw, c)` in row-major order.
pub fn im2col<T: Scalar>(x: &Tensor<T>, win: &Window) -> Vec<T> {
    let patch = win.patch();
    let mut cols = vec![T::zero(); win.positions() * patch];
    let xd = x.data();
    let c = win.c;
    let mut row = 0;
    for b in 0..win.batch {
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, win.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, win.w) else {
                            continue;
                        };
                        let src = ((b * win.h + iy) * win.w + ix) * c;
                        let off = (ky * win.kw + kx) * c;
                        dst[off..off + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], win: &Window) -> Tensor<T> {
    let patch = win.patch();
    let c = win.c;
    let mut x = Tensor::zeros(&[win.batch, win.h, win.w, c]);
    let xd = x.data_mut();
    let mut row = 0;
    for b in 0..win.batch {
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..win.kh {
                    let Some(iy) = Window::source(oy, ky, win.stride, win.pad_top, win.h) else {
                        continue;
                    };
                    for kx in 0..win.kw {
                        let Some(ix) = Window::source(ox, kx, win.stride, win.pad_left, win.w) else {
                            continue;
                        };
                        let dst = ((b * win.h + iy) * win.w + ix) * c;
                        let off = (ky * win.kw + kx) * c;
                        for (d, &s) in xd[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

fn check_kernel<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<()> {
    if kernel.rank() != 4 || x.rank() != 4 || kernel.shape()[2] != x.shape()[3] {
        return Err(shape_mismatch("conv2d", x.shape(), kernel.shape()));
    }
    Ok(())
}

/// 2-D convolution as im2col followed by a matrix product with the
/// `[kh·kw·ci, co]` view of the kernel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_kernel(x, kernel)?;
    let ks = kernel.shape();
    let co = ks[3];
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_mismatch("conv2d bias", &[co], &[b.len()]));
        }
    }
    let win = Window::resolve("conv2d", x.shape(), ks[0], ks[1], stride, padding)?;
    let cols = im2col(x, &win);
    let rows = win.positions();
    let mut out = vec![T::zero(); rows * co];
    gemm(&cols, kernel.data(), &mut out, rows, win.patch(), co);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(co.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![win.batch, win.oh, win.ow, co], out)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    input_shape: &[usize],
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    let win = Window::resolve("conv2d", input_shape, ks[0], ks[1], stride, padding)?;
    let co = ks[3];
    let expected = [win.batch, win.oh, win.ow, co];
    if dy.shape() != expected {
        return Err(shape_mismatch("conv2d backward", dy.shape(), &expected));
    }
    let rows = win.positions();
    let mut dcols = vec![T::zero(); rows * win.patch()];
    gemm_bt(dy.data(), kernel.data(), &mut dcols, rows, co, win.patch());
    Ok(col2im(&dcols, &win))
}

/// Pooling reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling output plus, for max pooling, the flat input index that won
/// each output position.
pub struct PoolOutput<T: Scalar> {
    pub y: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    size: usize,
    stride: usize,
    padding: Padding,
) -> Result<PoolOutput<T>> {
    let win = Window::resolve("pool", x.shape(), size, size, stride, padding)?;
    let c = win.c;
    let xd = x.data();
    let mut y = Tensor::zeros(&[win.batch, win.oh, win.ow, c]);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax = vec![0; y.len()];
    }
    let yd = y.data_mut();
    for b in 0..win.batch {
        for oy in 0..win.oh {
            for ox in 0..win.ow {
                let out_base = ((b * win.oh + oy) * win.ow + ox) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut sum = 0.0f64;
                    let mut count = 0usize;
                    for ky in 0..size {
                        let Some(iy) = Window::source(oy, ky, stride, win.pad_top, win.h) else {
                            continue;
                        };
                        for kx in 0..size {
                            let Some(ix) = Window::source(ox, kx, stride, win.pad_left, win.w) else {
                                continue;
                            };
                            let idx = ((b * win.h + iy) * win.w + ix) * c + ch;
                            let v = xd[idx];
                            if v > best || best_idx == usize::MAX {
                                best = v;
                                best_idx = idx;
                            }
                            sum += v.as_f64();
                            count += 1;
                        }
                    }
                    yd[out_base + ch] = match kind {
                        PoolKind::Max => {
                            argmax[out_base + ch] = best_idx;
                            best
                        }
                        PoolKind::Avg => T::from_f64(sum / count as f64),
                    };
                }
            }
        }
    }
    Ok(PoolOutput { y, argmax })
}

pub fn pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input_shape: &[usize],
    kind: PoolKind,
    size: usize,
    stride: usize,
    padding: Padding,
    argmax: &[usize],
) -> Result<Tensor<T>> {
    let win = Window::resolve("pool", input_shape, size, size, stride, padding)?;
    let c = win.c;
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    let dyd = dy.data();
    match kind {
        PoolKind::Max => {
            for (&g, &idx) in dyd.iter().zip(argmax) {
                dxd[idx] += g;
            }
        }
        PoolKind::Avg => {
            for b in 0..win.batch {
                for oy in 0..win.oh {
                    for ox in 0..win.ow {
                        let mut taps = Vec::with_capacity(size * size);
                        for ky in 0..size {
                            let Some(iy) = Window::source(oy, ky, stride, win.pad_top, win.h) else {
                                continue;
                            };
                            for kx in 0..size {
                                if let Some(ix) = Window::source(ox, kx, stride, win.pad_left, win.w) {
                                    taps.push((b * win.h + iy) * win.w + ix);
                                }
                            }
                        }
                        let scale = T::one() / T::from_usize(taps.len());
                        let out_base = ((b * win.oh + oy) * win.ow + ox) * c;
                        for &t in &taps {
                            for ch in 0..c {
                                dxd[t * c + ch] += dyd[out_base + ch] * scale;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Spatial mean of every channel: `[b,h,w,c] → [b,c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidArgument(format!(
            "global_avg_pool expects NHWC with non-empty spatial extent, got {s:?}"
        )));
    }
    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
    let mut out = vec![T::zero(); b * c];
    for n in 0..b {
        let mut acc = vec![0.0f64; c];
        for p in 0..hw {
            let base = (n * hw + p) * c;
            for (a, v) in acc.iter_mut().zip(&x.data()[base..base + c]) {
                *a += v.as_f64();
            }
        }
        for (o, a) in out[n * c..(n + 1) * c].iter_mut().zip(acc) {
            *o = T::from_f64(a / hw as f64);
        }
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let scale = T::one() / T::from_usize(h * w);
    Tensor::from_fn(input_shape, |i| {
        let ch = i % c;
        let n = i / (h * w * c);
        dy.data()[n * c + ch] * scale
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel mean and (biased) variance over every axis but the last,
/// accumulated in `f64`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let n = x.len().checked_div(c).unwrap_or(0);
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks_exact(c.max(1)) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= n.max(1) as f64;
    }
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks_exact(c.max(1)) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    for s in var.iter_mut() {
        *s /= n.max(1) as f64;
    }
    (mean, var)
}

/// Values retained from a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<()> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("batch-norm eps must be > 0, got {eps}")));
    }
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_mismatch("batchnorm", x.shape(), &[gamma.len(), beta.len()]));
    }
    Ok(())
}

/// Training-mode batch norm with batch statistics.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    check_bn(x, gamma, beta, eps)?;
    let c = x.channels();
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ((xr, hr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(x_hat.data_mut().chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for j in 0..c {
            let h = (xr[j].as_f64() - mean[j]) * inv_std[j];
            hr[j] = T::from_f64(h);
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std: inv_std.into_iter().map(T::from_f64).collect(),
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Inference-mode batch norm with fixed statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check_bn(x, gamma, beta, eps)?;
    let c = x.channels();
    let eps = T::from_f64(eps);
    let scale: Vec<T> = (0..c).map(|j| gamma[j] / (var[j] + eps).sqrt()).collect();
    let shift: Vec<T> = (0..c).map(|j| beta[j] - mean[j] * scale[j]).collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = row[j] * scale[j] + shift[j];
        }
    }
    Ok(y)
}

/// Gradients of a training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = dy.channels();
    let n = dy.len() / c.max(1);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (gr, hr) in dy.data().chunks_exact(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for j in 0..c {
            dbeta[j] += gr[j].as_f64();
            dgamma[j] += gr[j].as_f64() * hr[j].as_f64();
        }
    }
    let nf = n as f64;
    let mut dx = Tensor::zeros(dy.shape());
    for ((dr, gr), hr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(cache.x_hat.data().chunks_exact(c))
    {
        for j in 0..c {
            let k = gamma[j].as_f64() * cache.inv_std[j].as_f64() / nf;
            let v = k * (nf * gr[j].as_f64() - dbeta[j] - hr[j].as_f64() * dgamma[j]);
            dr[j] = T::from_f64(v);
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

/// Gradients of an inference-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_infer_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = dy.channels();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = Tensor::zeros(dy.shape());
    for ((dr, gr), xr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(x.data().chunks_exact(c))
    {
        for j in 0..c {
            let g = gr[j].as_f64();
            let x_hat = (xr[j].as_f64() - mean[j].as_f64()) * inv_std[j];
            dbeta[j] += g;
            dgamma[j] += g * x_hat;
            dr[j] = T::from_f64(g * gamma[j].as_f64() * inv_std[j]);
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

/// Stateful batch-norm layer: affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

impl<T: Scalar> BatchNorm<T> {
    /// Fresh layer: `gamma = 1`, `beta = 0`, unit running variance.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; infer mode uses the running averages.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                self.update_running(&cache.batch_mean, &cache.batch_var);
                Ok(y)
            }
            Mode::Infer => batchnorm_infer(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
        }
    }

    pub fn select_channels(&self, keep: &[usize]) -> Self {
        let pick = |v: &[T]| keep.iter().map(|&k| v[k]).collect();
        Self {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// `x · W + b` with `x: [b, in]`, `W: [in, out]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let ws = weight.shape();
    if x.rank() != 2 || ws.len() != 2 || x.shape()[1] != ws[0] || bias.len() != ws[1] {
        return Err(shape_mismatch("dense", x.shape(), ws));
    }
    let (b, i, o) = (x.shape()[0], ws[0], ws[1]);
    let mut out = vec![T::zero(); b * o];
    for row in out.chunks_exact_mut(o.max(1)) {
        row.copy_from_slice(bias);
    }
    gemm(x.data(), weight.data(), &mut out, b, i, o);
    Tensor::new(vec![b, o], out)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != b {
        return Err(shape_mismatch("softmax_cross_entropy labels", &[b], &[labels.len()]));
    }
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    for (n, (row, g)) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.data_mut().chunks_exact_mut(k))
        .enumerate()
    {
        let label = labels[n];
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            let t = if j == label { 1.0 } else { 0.0 };
            *gj = T::from_f64((p - t) / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Dense classifier layer followed by mean softmax cross-entropy; returns
/// the loss and the logits.
pub fn dense_softmax_ce<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    if x.rank() == 2 && x.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let logits = dense_forward(x, weight, bias)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, logits))
}
