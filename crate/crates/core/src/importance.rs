//! Importance scores for basis vectors and output channels, per-layer
//! normalization, and the global removal threshold.
//!
//! Layers are identified by node name. In basis mode the scored layers are
//! the basis-scaling layers (one score per basis vector). In channel mode
//! they are the channel owners: plain convolutions and basis-scaling layers
//! (one score per output channel).

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::engine::{loss_and_gradients, Mode};
use crate::error::{Error, Result};
use crate::factorization::compact_svd;
use crate::graph::head::owns_channels;
use crate::graph::{Layer, NetGraph, NodeId, ParamKind, ParamRef};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Basis,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Method {
    TaylorFo,
    L1,
    Hrank,
    Singular,
    Random { seed: u64 },
    Reverse,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::TaylorFo => f.write_str("taylor_fo"),
            Method::L1 => f.write_str("l1"),
            Method::Hrank => f.write_str("hrank"),
            Method::Singular => f.write_str("singular"),
            Method::Random { seed } => write!(f, "random:{seed}"),
            Method::Reverse => f.write_str("reverse"),
        }
    }
}

/// Accepts `taylor_fo`, `l1`, `hrank`, `singular`, `reverse`, `random`
/// (seed 0) and `random:<seed>`.
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "taylor_fo" | "taylorfo" | "taylor" => Method::TaylorFo,
            "l1" => Method::L1,
            "hrank" => Method::Hrank,
            "singular" | "sv" => Method::Singular,
            "reverse" => Method::Reverse,
            "random" => Method::Random { seed: 0 },
            other => match other.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Method::Random { seed },
                _ => return Err(Error::UnknownMethod(s.to_string())),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub method: Method,
    pub target: Target,
    pub layers: Vec<LayerScores>,
}

impl ImportanceTable {
    /// Builds a table from raw scores and normalizes it.
    pub fn from_raw(method: Method, target: Target, raw: Vec<(String, Vec<f64>)>) -> Self {
        normalize_per_layer(Self {
            method,
            target,
            layers: raw
                .into_iter()
                .map(|(layer, raw)| LayerScores {
                    layer,
                    normalized: raw.clone(),
                    raw,
                })
                .collect(),
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.raw.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same table without the named layers.
    pub fn without(&self, excluded: &HashSet<String>) -> Self {
        Self {
            method: self.method,
            target: self.target,
            layers: self
                .layers
                .iter()
                .filter(|l| !excluded.contains(&l.layer))
                .cloned()
                .collect(),
        }
    }

    /// Writes `layer_id,index,raw,normalized` lines under a header.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "layer_id,index,raw,normalized")?;
        for l in &self.layers {
            for (i, (r, n)) in l.raw.iter().zip(&l.normalized).enumerate() {
                writeln!(out, "{},{i},{r},{n}", l.layer)?;
            }
        }
        Ok(())
    }
}

/// Divides every layer by its maximum; all-zero layers stay zero.
pub fn normalize_per_layer(mut table: ImportanceTable) -> ImportanceTable {
    for l in &mut table.layers {
        let max = l.raw.iter().copied().fold(0.0f64, f64::max);
        l.normalized = if max > 0.0 {
            l.raw.iter().map(|&v| v / max).collect()
        } else {
            vec![0.0; l.raw.len()]
        };
    }
    table
}

/// Threshold removing at most `floor(fraction·N)` of the pooled normalized
/// scores: the `(m+1)`-th smallest value. Items strictly below it are
/// pruned; ties are kept. A zero fraction yields `−∞`.
pub fn global_threshold(table: &ImportanceTable, remove_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(Error::InvalidArgument(format!(
            "remove fraction must lie in [0, 1), got {remove_fraction}"
        )));
    }
    let mut pooled: Vec<f64> = table.layers.iter().flat_map(|l| l.normalized.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("importance table is empty".into()));
    }
    if remove_fraction == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    pooled.sort_by(f64::total_cmp);
    let m = (remove_fraction * pooled.len() as f64).floor() as usize;
    Ok(pooled[m.min(pooled.len() - 1)])
}

/// Nodes scored in the given mode, in graph order.
pub fn scored_layers<T: Scalar>(g: &NetGraph<T>, target: Target) -> Vec<NodeId> {
    (0..g.len())
        .filter(|&id| match target {
            Target::Basis => matches!(g.node(id).layer, Layer::BasisScalingConv(_)),
            Target::Channel => owns_channels(&g.node(id).layer),
        })
        .collect()
}

fn check_batches<T: Scalar>(batches: &[Batch<T>]) -> Result<()> {
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::EmptyEvalSet);
    }
    Ok(())
}

/// How a channel owner's per-channel factor is found in channel mode.
enum Gate {
    /// Gamma of the batch-norm consuming the owner.
    BnGamma(NodeId),
    /// A virtual unit gate on the owner's output: its gradient is
    /// `Σ y·∂L/∂y` over the batch and spatial positions.
    Virtual,
}

fn channel_gate<T: Scalar>(g: &NetGraph<T>, consumers: &[Vec<NodeId>], id: NodeId) -> Gate {
    match consumers[id].as_slice() {
        [only] if matches!(g.node(*only).layer, Layer::BatchNorm(_)) => Gate::BnGamma(*only),
        _ => Gate::Virtual,
    }
}

/// First-order Taylor importance `(g·s)²` averaged over the batches, with
/// `g` the batch's loss gradient of the scaling factor `s`. Evaluated in
/// inference mode; the model is not modified.
pub fn taylor_fo_scores<T: Scalar>(g: &NetGraph<T>, batches: &[Batch<T>], target: Target) -> Result<ImportanceTable> {
    check_batches(batches)?;
    let layers = scored_layers(g, target);
    let consumers = g.consumers();
    let gates: Vec<Gate> = layers.iter().map(|&id| channel_gate(g, &consumers, id)).collect();
    let capture: Vec<NodeId> = match target {
        Target::Basis => Vec::new(),
        Target::Channel => layers
            .iter()
            .zip(&gates)
            .filter(|(_, gate)| matches!(gate, Gate::Virtual))
            .map(|(&id, _)| id)
            .collect(),
    };
    let mut sums: Vec<Vec<f64>> = layers.iter().map(|&id| vec![0.0; score_width(g, id, target)]).collect();
    let mut used = 0usize;
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let (_, tape, grads) = loss_and_gradients(g, &batch.x, &batch.labels, Mode::Infer, &capture)?;
        used += 1;
        for ((&id, gate), acc) in layers.iter().zip(&gates).zip(sums.iter_mut()) {
            let per: Vec<f64> = match (target, gate) {
                (Target::Basis, _) => factor_products(g, &grads, id, ParamKind::Scale)?,
                (Target::Channel, Gate::BnGamma(bn)) => factor_products(g, &grads, *bn, ParamKind::Gamma)?,
                (Target::Channel, Gate::Virtual) => {
                    let y = tape.activation(id);
                    let dy = grads
                        .activations
                        .get(&id)
                        .ok_or_else(|| Error::Invariant(format!("no gradient captured for {}", g.node(id).name)))?;
                    let c = y.channels();
                    let mut s = vec![0.0f64; c];
                    for (yr, dr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                        for j in 0..c {
                            s[j] += yr[j].as_f64() * dr[j].as_f64();
                        }
                    }
                    s
                }
            };
            for (a, v) in acc.iter_mut().zip(per) {
                *a += v * v;
            }
        }
    }
    let raw = layers
        .iter()
        .zip(sums)
        .map(|(&id, s)| (g.node(id).name.clone(), s.into_iter().map(|v| v / used as f64).collect()))
        .collect();
    Ok(ImportanceTable::from_raw(Method::TaylorFo, target, raw))
}

/// `g·s` for each entry of a trainable factor vector.
fn factor_products<T: Scalar>(
    g: &NetGraph<T>,
    grads: &crate::engine::Gradients<T>,
    node: NodeId,
    kind: ParamKind,
) -> Result<Vec<f64>> {
    let p = ParamRef { node, kind };
    let values = g.param(p)?;
    Ok(match grads.get(p) {
        Some(gr) => values.iter().zip(gr).map(|(s, d)| s.as_f64() * d.as_f64()).collect(),
        // Frozen factor: no gradient, no importance signal.
        None => vec![0.0; values.len()],
    })
}

fn score_width<T: Scalar>(g: &NetGraph<T>, id: NodeId, target: Target) -> usize {
    match (&g.node(id).layer, target) {
        (Layer::BasisScalingConv(b), Target::Basis) => b.rank,
        _ => g.shape(id).channels(),
    }
}

/// Absolute-sum of the weights producing each output channel: the kernel
/// slice `W[:, :, :, j]` of a plain convolution, column `j` of `V̄ᵀ` for a
/// basis-scaling layer.
pub fn l1_scores<T: Scalar>(g: &NetGraph<T>) -> Result<ImportanceTable> {
    let mut raw = Vec::new();
    for id in scored_layers(g, Target::Channel) {
        let n = g.node(id);
        let scores = match &n.layer {
            Layer::Conv(c) => {
                let k = c.kernel.as_ref().ok_or_else(|| Error::Unmaterialized(n.name.clone()))?;
                let mut s = vec![0.0f64; c.c_out];
                for row in k.data().chunks_exact(c.c_out) {
                    for (a, v) in s.iter_mut().zip(row) {
                        *a += v.as_f64().abs();
                    }
                }
                s
            }
            Layer::BasisScalingConv(b) => {
                let vt = b.vbar_t.as_ref().ok_or_else(|| Error::Unmaterialized(n.name.clone()))?;
                let mut s = vec![0.0f64; b.c_out];
                for i in 0..vt.rows() {
                    for (a, v) in s.iter_mut().zip(vt.row(i)) {
                        *a += v.as_f64().abs();
                    }
                }
                s
            }
            _ => unreachable!("channel owners only"),
        };
        raw.push((n.name.clone(), scores));
    }
    Ok(ImportanceTable::from_raw(Method::L1, Target::Channel, raw))
}

/// Relative tolerance of the numerical rank: singular values at or below
/// `max(h, w)·σ_max·HRANK_RTOL` count as zero.
pub const HRANK_RTOL: f64 = 1e-6;

/// Numerical rank of an `h×w` map.
pub fn numerical_rank(map: &Matrix<f64>) -> Result<usize> {
    if map.frobenius_norm() == 0.0 {
        return Ok(0);
    }
    let f = compact_svd(map)?;
    let smax = f.sigma.first().copied().unwrap_or(0.0);
    let tol = map.rows().max(map.cols()) as f64 * smax * HRANK_RTOL;
    Ok(f.sigma.iter().filter(|&&s| s > tol).count())
}

/// Where a channel owner's feature map is observed: the end of the run of
/// batch-norm and ReLU nodes that exclusively follow it.
fn feature_point<T: Scalar>(g: &NetGraph<T>, consumers: &[Vec<NodeId>], id: NodeId) -> NodeId {
    let mut at = id;
    while let [only] = consumers[at].as_slice() {
        if matches!(g.node(*only).layer, Layer::BatchNorm(_) | Layer::Relu) {
            at = *only;
        } else {
            break;
        }
    }
    at
}

/// Average numerical rank of each channel's feature map over the images.
pub fn hrank_scores<T: Scalar>(g: &NetGraph<T>, batches: &[Batch<T>]) -> Result<ImportanceTable> {
    check_batches(batches)?;
    let layers = scored_layers(g, Target::Channel);
    let consumers = g.consumers();
    let points: Vec<NodeId> = layers.iter().map(|&id| feature_point(g, &consumers, id)).collect();
    let mut sums: Vec<Vec<f64>> = points.iter().map(|&p| vec![0.0; g.shape(p).channels()]).collect();
    let mut images = 0usize;
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let tape = crate::engine::forward(g, &batch.x, Mode::Infer)?;
        images += batch.len();
        for (&p, acc) in points.iter().zip(sums.iter_mut()) {
            let y = tape.activation(p);
            let s = y.shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            for img in 0..n {
                for (j, a) in acc.iter_mut().enumerate().take(c) {
                    let map = Matrix::from_fn(h, w, |r, q| y.data()[((img * h + r) * w + q) * c + j].as_f64());
                    *a += numerical_rank(&map)? as f64;
                }
            }
        }
    }
    let raw = layers
        .iter()
        .zip(sums)
        .map(|(&id, s)| (g.node(id).name.clone(), s.into_iter().map(|v| v / images as f64).collect()))
        .collect();
    Ok(ImportanceTable::from_raw(Method::Hrank, Target::Channel, raw))
}

/// Scores that ignore the data: singular values, their reversal (largest
/// first to go), or seeded uniform noise. Basis mode only.
pub fn baseline_scores<T: Scalar>(g: &NetGraph<T>, method: Method) -> Result<ImportanceTable> {
    let mut rng = match method {
        Method::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Method::Singular | Method::Reverse => None,
        other => return Err(Error::UnknownMethod(format!("{other} is not a baseline"))),
    };
    let mut raw = Vec::new();
    for id in scored_layers(g, Target::Basis) {
        let n = g.node(id);
        let Layer::BasisScalingConv(b) = &n.layer else {
            unreachable!("basis layers only")
        };
        let scores: Vec<f64> = match &mut rng {
            Some(rng) => (0..b.rank).map(|_| rng.random::<f64>()).collect(),
            None => {
                let sigma: Vec<f64> = b
                    .singular_values()
                    .ok_or_else(|| Error::Unmaterialized(n.name.clone()))?
                    .into_iter()
                    .map(|v| v.as_f64())
                    .collect();
                if method == Method::Singular {
                    sigma
                } else {
                    let smax = sigma.iter().copied().fold(0.0, f64::max);
                    let eps = REVERSE_EPS * smax.max(f64::MIN_POSITIVE);
                    sigma.iter().map(|s| smax - s + eps).collect()
                }
            }
        };
        raw.push((n.name.clone(), scores));
    }
    Ok(ImportanceTable::from_raw(method, Target::Basis, raw))
}

/// Keeps reversed scores strictly positive, so the largest singular value
/// is not tied with an all-zero layer.
const REVERSE_EPS: f64 = 1e-6;

/// Dispatches on `method`.
pub fn compute_scores<T: Scalar>(
    g: &NetGraph<T>,
    method: Method,
    target: Target,
    batches: &[Batch<T>],
) -> Result<ImportanceTable> {
    match (method, target) {
        (Method::TaylorFo, _) => taylor_fo_scores(g, batches, target),
        (Method::L1, Target::Channel) => l1_scores(g),
        (Method::Hrank, Target::Channel) => hrank_scores(g, batches),
        (Method::Singular | Method::Random { .. } | Method::Reverse, Target::Basis) => baseline_scores(g, method),
        (m, t) => Err(Error::InvalidArgument(format!("method {m} does not score {t:?} targets"))),
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (ra, rb) = (ranks(&a[..n]), ranks(&b[..n]));
    let mean = (n - 1) as f64 / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}
