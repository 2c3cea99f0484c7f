//! Classifier-head replacement and batch-norm insertion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::templates::glorot_dense;
use super::{Layer, LayerNode, NetGraph, NodeId};
use crate::engine::ops::BatchNorm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Plain convolutions and basis-scaling layers: the nodes that own output
/// channels. The `U` half of a decomposed pair is excluded.
pub(crate) fn owns_channels<T: Scalar>(layer: &Layer<T>) -> bool {
    match layer {
        Layer::Conv(c) => !c.basis,
        Layer::BasisScalingConv(_) => true,
        _ => false,
    }
}

/// Keeps everything up to the last convolution and the batch-norm,
/// activation, and merge nodes that directly follow it.
pub fn truncate_to_features<T: Scalar>(g: &NetGraph<T>) -> Result<NetGraph<T>> {
    let nodes = g.nodes();
    let last_conv = nodes
        .iter()
        .rposition(|n| owns_channels(&n.layer))
        .ok_or_else(|| Error::Graph("graph has no convolution layer".into()))?;
    let mut end = last_conv;
    for (id, n) in nodes.iter().enumerate().skip(last_conv + 1) {
        match n.layer {
            Layer::BatchNorm(_) | Layer::Relu | Layer::Add | Layer::Concat => end = id,
            _ => break,
        }
    }
    NetGraph::new_pruned(nodes[..=end].to_vec(), end)
}

fn unique_name<T: Scalar>(nodes: &[LayerNode<T>], base: &str) -> String {
    if !nodes.iter().any(|n| n.name == base) {
        return base.to_string();
    }
    (2..)
        .map(|i| format!("{base}{i}"))
        .find(|cand| !nodes.iter().any(|n| &n.name == cand))
        .expect("unbounded search")
}

/// True when the output of `id` reaches a batch-norm through pooling and
/// concatenation nodes only.
fn reaches_bn<T: Scalar>(g: &NetGraph<T>, consumers: &[Vec<NodeId>], id: NodeId) -> bool {
    consumers[id].iter().any(|&c| match g.node(c).layer {
        Layer::BatchNorm(_) => true,
        Layer::Pool { .. } | Layer::Concat => reaches_bn(g, consumers, c),
        _ => false,
    })
}

/// Inserts a fresh batch-norm after every channel-owning layer whose output
/// is not normalized downstream. Pooling and concatenation are looked
/// through, so dense-block and transition convolutions keep relying on the
/// batch-norm of the consuming block.
pub fn insert_missing_bn<T: Scalar>(g: &NetGraph<T>) -> Result<NetGraph<T>> {
    let consumers = g.consumers();
    let needs_bn: Vec<bool> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, n)| owns_channels(&n.layer) && !reaches_bn(g, &consumers, id))
        .collect();
    if !needs_bn.iter().any(|&b| b) {
        return Ok(g.clone());
    }
    let mut out: Vec<LayerNode<T>> = Vec::with_capacity(g.len() + needs_bn.len());
    let mut remap: Vec<NodeId> = vec![0; g.len()];
    for (id, n) in g.nodes().iter().enumerate() {
        let mut node = n.clone();
        node.inputs = n.inputs.iter().map(|&i| remap[i]).collect();
        let channels = g.shape(id).channels();
        out.push(node);
        remap[id] = out.len() - 1;
        if needs_bn[id] {
            let name = unique_name(g.nodes(), &format!("{}_bn", n.name));
            out.push(LayerNode::new(
                name,
                Layer::BatchNorm(BatchNorm::new(channels)),
                vec![out.len() - 1],
            ));
            remap[id] = out.len() - 1;
        }
    }
    NetGraph::new(out, remap[g.output()])
}

/// Truncates after the feature extractor, inserts missing batch-norms, and
/// appends global average pooling plus a fresh `num_classes`-way dense
/// layer. Afterwards only batch-norm, scaling, and dense parameters are
/// trainable.
pub fn replace_head<T: Scalar>(g: &NetGraph<T>, num_classes: usize, seed: u64) -> Result<NetGraph<T>> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let features = insert_missing_bn(&truncate_to_features(g)?)?;
    let channels = features.shape(features.output()).channels();
    let (mut nodes, feat) = features.into_nodes();
    let gap_name = unique_name(&nodes, "avg_pool");
    nodes.push(LayerNode::new(gap_name, Layer::GlobalAvgPool, vec![feat]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = glorot_dense(channels, num_classes, Some(&mut rng));
    let dense_name = unique_name(&nodes, "predictions");
    nodes.push(LayerNode::new(dense_name, Layer::Dense(dense), vec![nodes.len() - 1]));
    for n in nodes.iter_mut() {
        n.trainable = matches!(
            n.layer,
            Layer::BatchNorm(_) | Layer::Dense(_) | Layer::BasisScalingConv(_)
        );
    }
    let out = nodes.len() - 1;
    NetGraph::new(nodes, out)
}
