//! Training of the trainable parameter set, evaluation, and batch-norm
//! statistics refresh.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Batch, Dataset};
use crate::engine::ops::softmax_cross_entropy;
use crate::engine::{
    apply_batch_stats, backward, cosine_lr, forward_prefix, forward_with, sgd_step, Dropout, Mode, LR_MAX, LR_MIN,
    MOMENTUM,
};
use crate::error::{Error, Result};
use crate::graph::{Layer, NetGraph, ParamRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub lr_min: f64,
    pub lr_max: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: MOMENTUM,
            lr_min: LR_MIN,
            lr_max: LR_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum translation as a fraction of the image extent.
    pub shift: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { shift: 0.0, flip: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            dropout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k.max(1))
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Logits in inference mode.
pub fn predict<T: Scalar>(g: &NetGraph<T>, x: &Tensor<T>, dropout: f64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let drop = (dropout > 0.0).then_some(Dropout { rate: dropout, rng: &mut rng });
    Ok(forward_with(g, x, Mode::Infer, drop)?.into_logits())
}

/// Classification accuracy in `[0, 1]`.
pub fn evaluate<T: Scalar>(g: &NetGraph<T>, data: &Dataset<T>, batch_size: usize, dropout: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut hits = 0;
    for b in data.batches(batch_size) {
        hits += correct(&predict(g, &b.x, dropout)?, &b.labels);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the parameters flagged trainable with momentum SGD under a cosine
/// schedule that spans this stage. Scaling factors are kept non-negative.
pub fn train_stage<T: Scalar>(
    mut g: NetGraph<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<(NetGraph<T>, Vec<EpochStats>)> {
    if cfg.epochs == 0 {
        return Ok((g, Vec::new()));
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs data and a positive batch size".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let params: Vec<ParamRef> = g.trainable_params();
    let mut velocity: BTreeMap<ParamRef, Vec<T>> = params
        .iter()
        .map(|&p| Ok((p, vec![T::zero(); g.param(p)?.len()])))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in train.shuffled_batches(cfg.batch_size, &mut rng) {
            let batch: Batch<T> = if cfg.augment.shift > 0.0 || cfg.augment.flip {
                augment(&batch, cfg.augment.shift, cfg.augment.flip, &mut rng)
            } else {
                batch
            };
            let drop = (cfg.dropout > 0.0).then_some(Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            });
            let tape = match forward_with(&g, &batch.x, Mode::Train, drop) {
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
                other => other?,
            };
            let (loss, dlogits) = softmax_cross_entropy(tape.logits(), &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            hits += correct(tape.logits(), &batch.labels);
            let grads = backward(&g, &tape, &dlogits)?;
            apply_batch_stats(&mut g, &tape);
            let lr = cosine_lr(step, total, cfg.optimizer.lr_min, cfg.optimizer.lr_max)?;
            for &p in &params {
                let grad = grads.get(p).ok_or_else(|| Error::Invariant("missing gradient".into()))?;
                let v = velocity.get_mut(&p).expect("velocity per parameter");
                let values = g.param_mut(p)?;
                sgd_step(values, grad, v, lr, cfg.optimizer.momentum, p.kind.non_negative());
                if !values.iter().all(|x| x.is_finite()) {
                    return Err(Error::Divergence { epoch });
                }
            }
            step += 1;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&g, v, cfg.batch_size, cfg.dropout)?),
            _ => None,
        };
        history.push(EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    Ok((g, history))
}

/// Replaces every batch-norm's running statistics with the exact mean and
/// (biased) variance of its input over `data`, layer by layer so each BN
/// sees inputs normalized by the already refreshed ones upstream.
pub fn recompute_bn_stats<T: Scalar>(mut g: NetGraph<T>, data: &Dataset<T>, batch_size: usize) -> Result<NetGraph<T>> {
    if data.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let batches = data.batches(batch_size);
    let bns: Vec<usize> = (0..g.len())
        .filter(|&id| matches!(g.node(id).layer, Layer::BatchNorm(_)))
        .collect();
    for id in bns {
        let input = g.node(id).inputs[0];
        let c = g.shape(input).channels();
        let (mut sum, mut sq, mut count) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for b in &batches {
            let tape = forward_prefix(&g, &b.x, input)?;
            for row in tape.logits().data().chunks_exact(c) {
                for j in 0..c {
                    let v = row[j].as_f64();
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        let Layer::BatchNorm(bn) = g.layer_mut(id) else { unreachable!() };
        for j in 0..c {
            let mean = sum[j] / count as f64;
            let var = (sq[j] / count as f64 - mean * mean).max(0.0);
            bn.running_mean[j] = T::from_f64(mean);
            bn.running_var[j] = T::from_f64(var);
        }
    }
    Ok(g)
}
