//! Basis pruning and double pruning as graph surgery.
//!
//! Basis pruning removes basis vectors (columns of `U`, entries of `s`, rows
//! of `V̄ᵀ`) and leaves every layer's input and output widths intact. Double
//! pruning removes output channels of channel owners and slices every
//! downstream consumer to match, tracking positions through concatenations.
//! Owners whose output reaches an element-wise add keep all channels.
//! Surviving entries always keep their original relative order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoAt, Result};
use crate::graph::head::owns_channels;
use crate::graph::{count_flops, replace_head, Layer, LayerNode, NetGraph, NodeId};
use crate::importance::{scored_layers, ImportanceTable, Target};
use crate::scalar::Scalar;

/// Per-layer keep vectors, keyed by node name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneMask {
    pub method: String,
    pub threshold: f64,
    pub fraction: f64,
    pub basis_keep: BTreeMap<String, Vec<bool>>,
    pub channel_keep: BTreeMap<String, Vec<bool>>,
    /// Channel owners exempt from pruning because they feed an add.
    pub protected: BTreeSet<String>,
    /// First layer removed by a whole-layer cascade, if any.
    pub cut_at: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KeepRecord {
    len: usize,
    kept: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    method: String,
    threshold: Option<f64>,
    fraction: f64,
    basis: BTreeMap<String, KeepRecord>,
    channel: BTreeMap<String, KeepRecord>,
    protected: BTreeSet<String>,
    cut_at: Option<String>,
}

fn to_records(m: &BTreeMap<String, Vec<bool>>) -> BTreeMap<String, KeepRecord> {
    m.iter()
        .map(|(k, v)| {
            (
                k.clone(),
                KeepRecord {
                    len: v.len(),
                    kept: kept_indices(v),
                },
            )
        })
        .collect()
}

fn from_records(m: BTreeMap<String, KeepRecord>) -> Result<BTreeMap<String, Vec<bool>>> {
    m.into_iter()
        .map(|(k, r)| {
            let mut v = vec![false; r.len];
            for i in r.kept {
                *v.get_mut(i)
                    .ok_or_else(|| Error::Format(format!("mask index {i} out of range for {k}")))? = true;
            }
            Ok((k, v))
        })
        .collect()
}

impl PruneMask {
    /// JSON with `layer → {len, kept}` entries. A `−∞` threshold is written
    /// as `null`.
    pub fn to_json(&self) -> Result<String> {
        let rec = MaskRecord {
            method: self.method.clone(),
            threshold: self.threshold.is_finite().then_some(self.threshold),
            fraction: self.fraction,
            basis: to_records(&self.basis_keep),
            channel: to_records(&self.channel_keep),
            protected: self.protected.clone(),
            cut_at: self.cut_at.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: MaskRecord = serde_json::from_str(s)?;
        Ok(Self {
            method: rec.method,
            threshold: rec.threshold.unwrap_or(f64::NEG_INFINITY),
            fraction: rec.fraction,
            basis_keep: from_records(rec.basis)?,
            channel_keep: from_records(rec.channel)?,
            protected: rec.protected,
            cut_at: rec.cut_at,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()? + "\n").at(path.as_ref())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref()).at(path.as_ref())?)
    }

    /// Kept basis vectors summed over layers.
    pub fn basis_kept(&self) -> usize {
        self.basis_keep.values().map(|v| v.iter().filter(|&&k| k).count()).sum()
    }
}

pub fn kept_indices(keep: &[bool]) -> Vec<usize> {
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

fn keep_from_table(table: &ImportanceTable, threshold: f64) -> BTreeMap<String, Vec<bool>> {
    table
        .layers
        .iter()
        .map(|l| (l.layer.clone(), l.normalized.iter().map(|&v| v >= threshold).collect()))
        .collect()
}

fn num_classes<T: Scalar>(g: &NetGraph<T>) -> Result<usize> {
    g.nodes()
        .iter()
        .rev()
        .find_map(|n| match &n.layer {
            Layer::Dense(d) => Some(d.outputs()),
            _ => None,
        })
        .ok_or_else(|| Error::Graph("graph has no classifier".into()))
}

/// Removes basis vectors whose normalized score is below `threshold`.
///
/// When every basis vector of a layer goes, that layer and everything after
/// it are removed and a fresh head (seeded by `head_seed`) is attached to
/// the last surviving features. Emptying the first layer is an error.
pub fn basis_prune<T: Scalar>(
    g: &NetGraph<T>,
    table: &ImportanceTable,
    threshold: f64,
    head_seed: u64,
) -> Result<(NetGraph<T>, PruneMask)> {
    if table.target != Target::Basis {
        return Err(Error::InvalidArgument("basis pruning needs basis scores".into()));
    }
    let mut keep = keep_from_table(table, threshold);
    let basis_layers = scored_layers(g, Target::Basis);
    if basis_layers.is_empty() {
        return Err(Error::InvalidArgument("graph has no decomposed layers".into()));
    }
    for &id in &basis_layers {
        let n = g.node(id);
        let Layer::BasisScalingConv(b) = &n.layer else { unreachable!() };
        let entry = keep.entry(n.name.clone()).or_insert_with(|| vec![true; b.rank]);
        if entry.len() != b.rank {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} basis vectors of {}",
                entry.len(),
                b.rank,
                n.name
            )));
        }
    }
    let first_empty = basis_layers
        .iter()
        .copied()
        .find(|&id| !keep[&g.node(id).name].iter().any(|&k| k));
    let mut mask = PruneMask {
        method: table.method.to_string(),
        threshold,
        basis_keep: keep.clone(),
        ..Default::default()
    };
    let cut = match first_empty {
        Some(id) if id == basis_layers[0] => return Err(Error::ModelDestroyed(g.node(id).name.clone())),
        Some(id) => {
            mask.cut_at = Some(g.node(id).name.clone());
            Some(g.node(id).inputs[0])
        }
        None => None,
    };

    let end = cut.unwrap_or(g.len());
    let mut nodes: Vec<LayerNode<T>> = Vec::with_capacity(end);
    for (id, n) in g.nodes().iter().enumerate().take(end) {
        let mut node = n.clone();
        if let Layer::BasisScalingConv(b) = &n.layer {
            let kept = kept_indices(&keep[&n.name]);
            if kept.len() < b.rank {
                let u_id = n.inputs[0];
                let Layer::Conv(u) = &mut nodes[u_id].layer else {
                    return Err(Error::Graph(format!("{} is not fed by a basis convolution", n.name)));
                };
                u.kernel = u.kernel.as_ref().map(|k| k.select_axis(3, &kept));
                u.c_out = kept.len();
                let Layer::BasisScalingConv(nb) = &mut node.layer else { unreachable!() };
                nb.rank = kept.len();
                nb.scale = kept.iter().map(|&i| b.scale[i]).collect();
                nb.vbar_t = b.vbar_t.as_ref().map(|v| v.select_rows(&kept));
            }
        }
        debug_assert_eq!(nodes.len(), id);
        nodes.push(node);
    }
    let pruned = match cut {
        None => NetGraph::new(nodes, g.output())?,
        Some(_) => {
            let classes = num_classes(g)?;
            let last = nodes.len() - 1;
            replace_head(&NetGraph::new_pruned(nodes, last)?, classes, head_seed)?
        }
    };
    Ok((pruned, mask))
}

/// Channel owners whose output reaches an add through batch-norm,
/// activation, pooling, or concatenation nodes.
pub fn merge_protected<T: Scalar>(g: &NetGraph<T>) -> BTreeSet<String> {
    let consumers = g.consumers();
    fn reaches_add<T: Scalar>(g: &NetGraph<T>, consumers: &[Vec<NodeId>], id: NodeId) -> bool {
        consumers[id].iter().any(|&c| match g.node(c).layer {
            Layer::Add => true,
            Layer::BatchNorm(_) | Layer::Relu | Layer::Pool { .. } | Layer::Concat => reaches_add(g, consumers, c),
            _ => false,
        })
    }
    (0..g.len())
        .filter(|&id| owns_channels(&g.node(id).layer) && reaches_add(g, &consumers, id))
        .map(|id| g.node(id).name.clone())
        .collect()
}

/// Output-channel keep vector of every node, derived from the owners'
/// masks. Owners feeding an add are forced to keep everything; owners
/// without an entry keep everything; other entries in `masks` are ignored,
/// so feeding the result back in reproduces it.
pub fn propagate_masks<T: Scalar>(
    g: &NetGraph<T>,
    masks: &BTreeMap<String, Vec<bool>>,
) -> Result<BTreeMap<String, Vec<bool>>> {
    let plan = channel_plan(g, masks)?;
    Ok(g.nodes().iter().zip(plan).map(|(n, m)| (n.name.clone(), m)).collect())
}

fn channel_plan<T: Scalar>(g: &NetGraph<T>, masks: &BTreeMap<String, Vec<bool>>) -> Result<Vec<Vec<bool>>> {
    let protected = merge_protected(g);
    let mut plan: Vec<Vec<bool>> = Vec::with_capacity(g.len());
    for (id, n) in g.nodes().iter().enumerate() {
        let width = g.shape(id).channels();
        let input = |k: usize| &plan[n.inputs[k]];
        let out = match &n.layer {
            _ if owns_channels(&n.layer) => match masks.get(&n.name) {
                Some(_) if protected.contains(&n.name) => vec![true; width],
                Some(m) if m.len() != width => {
                    return Err(Error::InvalidArgument(format!(
                        "mask for {} has {} entries, layer has {width} channels",
                        n.name,
                        m.len()
                    )))
                }
                Some(m) if !m.iter().any(|&k| k) => {
                    return Err(Error::InvalidArgument(format!("mask removes every channel of {}", n.name)))
                }
                Some(m) => m.clone(),
                None => vec![true; width],
            },
            Layer::BatchNorm(_) | Layer::Relu | Layer::Pool { .. } | Layer::GlobalAvgPool => input(0).clone(),
            Layer::Concat => n.inputs.iter().flat_map(|&i| plan[i].iter().copied()).collect(),
            Layer::Add => {
                if let Some(&i) = n.inputs.iter().find(|&&i| plan[i].iter().any(|&k| !k)) {
                    return Err(Error::Invariant(format!(
                        "pruned channels of {} reach add node {}",
                        g.node(i).name,
                        n.name
                    )));
                }
                vec![true; width]
            }
            _ => vec![true; width],
        };
        plan.push(out);
    }
    Ok(plan)
}

/// Applies per-node output keep vectors (as produced by
/// [`propagate_masks`]) to weights, biases, batch-norms, and the inputs of
/// every consumer.
pub fn apply_channel_masks<T: Scalar>(g: &NetGraph<T>, masks: &BTreeMap<String, Vec<bool>>) -> Result<NetGraph<T>> {
    let plan = channel_plan(g, masks)?;
    let all = |m: &[bool]| m.iter().all(|&k| k);
    let mut nodes = Vec::with_capacity(g.len());
    for (id, n) in g.nodes().iter().enumerate() {
        let out = &plan[id];
        let mut node = n.clone();
        match &mut node.layer {
            Layer::Conv(c) => {
                let inp = &plan[n.inputs[0]];
                if !all(inp) {
                    let keep = kept_indices(inp);
                    c.kernel = c.kernel.as_ref().map(|k| k.select_axis(2, &keep));
                    c.c_in = keep.len();
                }
                if !c.basis && !all(out) {
                    let keep = kept_indices(out);
                    c.kernel = c.kernel.as_ref().map(|k| k.select_axis(3, &keep));
                    c.bias = c.bias.as_ref().map(|b| keep.iter().map(|&i| b[i]).collect());
                    c.c_out = keep.len();
                }
            }
            Layer::BasisScalingConv(b) if !all(out) => {
                let keep = kept_indices(out);
                b.vbar_t = b.vbar_t.as_ref().map(|v| v.select_columns(&keep));
                b.bias = b.bias.as_ref().map(|v| keep.iter().map(|&i| v[i]).collect());
                b.c_out = keep.len();
            }
            Layer::BatchNorm(bn) if !all(out) => {
                *bn = bn.select_channels(&kept_indices(out));
            }
            Layer::Dense(d) => {
                let inp = &plan[n.inputs[0]];
                if !all(inp) {
                    d.weight = d.weight.select_axis(0, &kept_indices(inp));
                }
            }
            _ => {}
        }
        nodes.push(node);
    }
    NetGraph::new(nodes, g.output())
}

/// Removes output channels whose normalized score is below `threshold`.
/// Merge-protected owners are never pruned; an owner that would lose every
/// channel keeps its highest-scoring one.
pub fn double_prune<T: Scalar>(
    g: &NetGraph<T>,
    table: &ImportanceTable,
    threshold: f64,
) -> Result<(NetGraph<T>, PruneMask)> {
    if table.target != Target::Channel {
        return Err(Error::InvalidArgument("double pruning needs channel scores".into()));
    }
    let protected = merge_protected(g);
    let mut keep = keep_from_table(table, threshold);
    for (name, k) in keep.iter_mut() {
        if protected.contains(name) {
            k.iter_mut().for_each(|v| *v = true);
        } else if !k.iter().any(|&v| v) {
            if let Some(l) = table.layer(name) {
                let best = (0..l.normalized.len())
                    .max_by(|&a, &b| l.normalized[a].total_cmp(&l.normalized[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                if let Some(v) = k.get_mut(best) {
                    *v = true;
                }
            }
        }
    }
    let pruned = apply_channel_masks(g, &keep)?;
    Ok((
        pruned,
        PruneMask {
            method: table.method.to_string(),
            threshold,
            channel_keep: keep,
            protected,
            ..Default::default()
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDelta {
    pub name: String,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// `1 − after/before`.
    pub param_pr: f64,
    pub flop_pr: f64,
    pub layers: Vec<LayerDelta>,
}

pub fn pruning_ratio(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

/// Parameters and FLOPs of two graphs at the same input extent.
pub fn prune_report<T: Scalar>(
    before: &NetGraph<T>,
    after: &NetGraph<T>,
    input: Option<(usize, usize)>,
) -> Result<PruneReport> {
    let b = count_flops(before, input)?;
    let a = count_flops(after, input)?;
    let mut layers: Vec<LayerDelta> = b
        .layers
        .iter()
        .map(|l| {
            let after = a.layer(&l.name);
            LayerDelta {
                name: l.name.clone(),
                params_before: l.params,
                params_after: after.map_or(0, |x| x.params),
                flops_before: l.flops,
                flops_after: after.map_or(0, |x| x.flops),
            }
        })
        .collect();
    for l in a.layers.iter().filter(|l| b.layer(&l.name).is_none()) {
        layers.push(LayerDelta {
            name: l.name.clone(),
            params_before: 0,
            params_after: l.params,
            flops_before: 0,
            flops_after: l.flops,
        });
    }
    Ok(PruneReport {
        params_before: b.total_params,
        params_after: a.total_params,
        flops_before: b.total_flops,
        flops_after: a.total_flops,
        param_pr: pruning_ratio(b.total_params, a.total_params),
        flop_pr: pruning_ratio(b.total_flops, a.total_flops),
        layers,
    })
}
