//! Prunable network graphs: typed layer nodes in topological order.
//!
//! Node 0 is always the input. Every other node lists the indices of its
//! producers, all of which precede it. Surgery never mutates a graph in
//! place; it assembles a new node list and re-validates it.

mod config;
mod cost;
pub(crate) mod head;
mod serial;
pub mod templates;

pub use config::{ArchConfig, LayerSpec, LayerSpecKind, ARCH_FORMAT};
pub use cost::{count_flops, count_params, cost_report, trainable_param_count, CostReport, LayerCost};
pub use head::{insert_missing_bn, replace_head, truncate_to_features};
pub use serial::{GraphRecord, NodeRecord};
pub use templates::{build_architecture, build_template, Template, WeightInit};

use std::collections::HashSet;

use crate::engine::ops::{output_extent, BatchNorm, Padding, PoolKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Activation shape of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Map { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }

    /// Per-example extents, e.g. `[h, w, c]`.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Map { h, w, c } => vec![h, w, c],
            Shape::Flat(n) => vec![n],
        }
    }
}

/// Plain convolution, or the basis half (`U`) of a decomposed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T: Scalar = f32> {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `[kh, kw, c_in, c_out]`; `None` for count-only graphs.
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
    /// Set on the `U` convolution produced by decomposition.
    pub basis: bool,
}

impl<T: Scalar> Conv<T> {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn param_count(&self) -> u64 {
        let bias = if self.bias.is_some() { self.c_out } else { 0 };
        (self.patch_len() * self.c_out + bias) as u64
    }
}

/// Channel-wise scaling by `s` followed by a 1×1 convolution with
/// `V̄ᵀ = diag(σ)·Vᵀ` and the source layer's bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisScalingConv<T: Scalar = f32> {
    pub rank: usize,
    pub c_out: usize,
    /// Trainable, kept non-negative.
    pub scale: Vec<T>,
    /// `rank × c_out`; `None` for count-only graphs.
    pub vbar_t: Option<Matrix<T>>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> BasisScalingConv<T> {
    pub fn param_count(&self) -> u64 {
        let bias = if self.bias.is_some() { self.c_out } else { 0 };
        (self.rank * self.c_out + self.rank + bias) as u64
    }

    /// Row norms of `V̄ᵀ`, i.e. the singular values of the source kernel.
    pub fn singular_values(&self) -> Option<Vec<T>> {
        let vt = self.vbar_t.as_ref()?;
        Some(
            (0..vt.rows())
                .map(|i| {
                    let s: f64 = vt.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum();
                    T::from_f64(s.sqrt())
                })
                .collect(),
        )
    }
}

/// Fully connected layer, weight `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    Input { h: usize, w: usize, c: usize },
    Conv(Conv<T>),
    BasisScalingConv(BasisScalingConv<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    Pool {
        kind: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Add,
    Concat,
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv(_) => "conv",
            Layer::BasisScalingConv(_) => "basis_scaling_conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::Pool { kind: PoolKind::Max, .. } => "maxpool",
            Layer::Pool { kind: PoolKind::Avg, .. } => "avgpool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Add => "add",
            Layer::Concat => "concat",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_))
    }

    /// Layers whose outputs carry their input channels unchanged.
    pub fn preserves_channels(&self) -> bool {
        matches!(
            self,
            Layer::BatchNorm(_) | Layer::Relu | Layer::Pool { .. } | Layer::GlobalAvgPool
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T: Scalar = f32> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<NodeId>,
    /// Whether the node's parameters (BN affine, scaling factors, dense)
    /// take part in training. Ignored for convolutions, which are frozen.
    pub trainable: bool,
}

impl<T: Scalar> LayerNode<T> {
    pub fn new(name: impl Into<String>, layer: Layer<T>, inputs: Vec<NodeId>) -> Self {
        Self {
            name: name.into(),
            layer,
            inputs,
            trainable: true,
        }
    }
}

/// Trainable parameter kinds. Convolution kernels and biases have no
/// variant: they are never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Scale,
    Gamma,
    Beta,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    pub fn non_negative(self) -> bool {
        self == ParamKind::Scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef {
    pub node: NodeId,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGraph<T: Scalar = f32> {
    nodes: Vec<LayerNode<T>>,
    output: NodeId,
    shapes: Vec<Shape>,
}

impl<T: Scalar> NetGraph<T> {
    /// Validates topology and runs shape inference.
    pub fn new(nodes: Vec<LayerNode<T>>, output: NodeId) -> Result<Self> {
        validate_topology(&nodes, output)?;
        let shapes = infer_shapes(&nodes)?;
        Ok(Self {
            nodes,
            output,
            shapes,
        })
    }

    /// Drops nodes that do not feed the output, then validates.
    pub fn new_pruned(nodes: Vec<LayerNode<T>>, output: NodeId) -> Result<Self> {
        let (nodes, output) = drop_dead(nodes, output)?;
        Self::new(nodes, output)
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn into_nodes(self) -> (Vec<LayerNode<T>>, NodeId) {
        (self.nodes, self.output)
    }

    pub fn node(&self, id: NodeId) -> &LayerNode<T> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.shapes[id]
    }

    pub fn input_extent(&self) -> (usize, usize, usize) {
        match self.nodes[0].layer {
            Layer::Input { h, w, c } => (h, w, c),
            _ => unreachable!("validated: node 0 is the input"),
        }
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn conv_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.layer.is_conv()).count()
    }

    /// Consumer lists, indexed by producer.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                out[i].push(id);
            }
        }
        out
    }

    pub fn is_decomposed(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.layer, Layer::BasisScalingConv(_)))
    }

    /// Whether every kernel is present, i.e. the graph can be evaluated.
    pub fn is_materialized(&self) -> bool {
        self.nodes.iter().all(|n| match &n.layer {
            Layer::Conv(c) => c.kernel.is_some(),
            Layer::BasisScalingConv(b) => b.vbar_t.is_some(),
            _ => true,
        })
    }

    /// Same graph with a different input extent.
    pub fn with_input_extent(&self, h: usize, w: usize) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        let c = self.input_extent().2;
        nodes[0].layer = Layer::Input { h, w, c };
        Self::new(nodes, self.output)
    }

    pub fn trainable_params(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (id, n) in self.nodes.iter().enumerate() {
            if !n.trainable {
                continue;
            }
            let kinds: &[ParamKind] = match n.layer {
                Layer::BasisScalingConv(_) => &[ParamKind::Scale],
                Layer::BatchNorm(_) => &[ParamKind::Gamma, ParamKind::Beta],
                Layer::Dense(_) => &[ParamKind::DenseWeight, ParamKind::DenseBias],
                _ => &[],
            };
            out.extend(kinds.iter().map(|&kind| ParamRef { node: id, kind }));
        }
        out
    }

    pub fn param(&self, p: ParamRef) -> Result<&[T]> {
        let node = &self.nodes[p.node];
        match (&node.layer, p.kind) {
            (Layer::BasisScalingConv(b), ParamKind::Scale) => Ok(&b.scale),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Ok(&bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Ok(&bn.beta),
            (Layer::Dense(d), ParamKind::DenseWeight) => Ok(d.weight.data()),
            (Layer::Dense(d), ParamKind::DenseBias) => Ok(&d.bias),
            _ => Err(Error::Graph(format!(
                "node {} has no parameter {:?}",
                node.name, p.kind
            ))),
        }
    }

    pub fn param_mut(&mut self, p: ParamRef) -> Result<&mut [T]> {
        let node = &mut self.nodes[p.node];
        match (&mut node.layer, p.kind) {
            (Layer::BasisScalingConv(b), ParamKind::Scale) => Ok(&mut b.scale),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Ok(&mut bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Ok(&mut bn.beta),
            (Layer::Dense(d), ParamKind::DenseWeight) => Ok(d.weight.data_mut()),
            (Layer::Dense(d), ParamKind::DenseBias) => Ok(&mut d.bias),
            _ => Err(Error::Graph(format!(
                "node {} has no parameter {:?}",
                node.name, p.kind
            ))),
        }
    }

    /// Mutable access to a node's layer payload. Callers must not change
    /// anything that affects shapes.
    pub fn layer_mut(&mut self, id: NodeId) -> &mut Layer<T> {
        &mut self.nodes[id].layer
    }

    pub fn set_trainable(&mut self, id: NodeId, trainable: bool) {
        self.nodes[id].trainable = trainable;
    }
}

fn validate_topology<T: Scalar>(nodes: &[LayerNode<T>], output: NodeId) -> Result<()> {
    let first = nodes
        .first()
        .ok_or_else(|| Error::Graph("graph has no nodes".into()))?;
    if !matches!(first.layer, Layer::Input { .. }) {
        return Err(Error::Graph(format!(
            "first node {} must be the input",
            first.name
        )));
    }
    if output >= nodes.len() {
        return Err(Error::Graph(format!("output index {output} out of range")));
    }
    let mut names = HashSet::new();
    for (id, n) in nodes.iter().enumerate() {
        if !names.insert(n.name.as_str()) {
            return Err(Error::Graph(format!("duplicate node name {}", n.name)));
        }
        if id > 0 && matches!(n.layer, Layer::Input { .. }) {
            return Err(Error::Graph(format!("second input node {}", n.name)));
        }
        if id > 0 && n.inputs.is_empty() {
            return Err(Error::Graph(format!("node {} has no inputs", n.name)));
        }
        if let Some(&bad) = n.inputs.iter().find(|&&i| i >= id) {
            return Err(Error::Graph(format!(
                "node {} consumes node {bad}, which does not precede it",
                n.name
            )));
        }
    }
    // Reachability from the input.
    let mut reach = vec![false; nodes.len()];
    reach[0] = true;
    for (id, n) in nodes.iter().enumerate().skip(1) {
        reach[id] = n.inputs.iter().any(|&i| reach[i]);
        if !reach[id] {
            return Err(Error::Graph(format!("node {} is unreachable", n.name)));
        }
    }
    Ok(())
}

/// Removes nodes that are not ancestors of `output`, remapping indices.
pub(crate) fn drop_dead<T: Scalar>(
    nodes: Vec<LayerNode<T>>,
    output: NodeId,
) -> Result<(Vec<LayerNode<T>>, NodeId)> {
    if output >= nodes.len() {
        return Err(Error::Graph(format!("output index {output} out of range")));
    }
    let mut live = vec![false; nodes.len()];
    live[output] = true;
    live[0] = true;
    for id in (0..=output).rev() {
        if live[id] {
            for &i in &nodes[id].inputs {
                live[i] = true;
            }
        }
    }
    let mut remap = vec![usize::MAX; nodes.len()];
    let mut kept = Vec::new();
    for (id, mut n) in nodes.into_iter().enumerate() {
        if !live[id] {
            continue;
        }
        n.inputs = n.inputs.iter().map(|&i| remap[i]).collect();
        remap[id] = kept.len();
        kept.push(n);
    }
    Ok((kept, remap[output]))
}

fn infer_error(node: &str, reason: impl Into<String>) -> Error {
    Error::ShapeInference {
        node: node.to_string(),
        reason: reason.into(),
    }
}

fn infer_shapes<T: Scalar>(nodes: &[LayerNode<T>]) -> Result<Vec<Shape>> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(nodes.len());
    for n in nodes {
        let ins: Vec<Shape> = n.inputs.iter().map(|&i| shapes[i]).collect();
        let single = || -> Result<Shape> {
            if ins.len() != 1 {
                return Err(infer_error(&n.name, format!("expects one input, got {}", ins.len())));
            }
            Ok(ins[0])
        };
        let map = |s: Shape| -> Result<(usize, usize, usize)> {
            match s {
                Shape::Map { h, w, c } => Ok((h, w, c)),
                Shape::Flat(_) => Err(infer_error(&n.name, "expects a spatial input")),
            }
        };
        let shape = match &n.layer {
            Layer::Input { h, w, c } => {
                if *h == 0 || *w == 0 || *c == 0 {
                    return Err(infer_error(&n.name, "input extents must be positive"));
                }
                Shape::Map { h: *h, w: *w, c: *c }
            }
            Layer::Conv(conv) => {
                let (h, w, c) = map(single()?)?;
                if c != conv.c_in {
                    return Err(infer_error(
                        &n.name,
                        format!("kernel expects {} input channels, got {c}", conv.c_in),
                    ));
                }
                if let Some(k) = &conv.kernel {
                    if k.shape() != [conv.kh, conv.kw, conv.c_in, conv.c_out] {
                        return Err(infer_error(&n.name, format!("kernel shape {:?}", k.shape())));
                    }
                }
                if let Some(b) = &conv.bias {
                    if b.len() != conv.c_out {
                        return Err(infer_error(&n.name, "bias length differs from c_out"));
                    }
                }
                let (oh, _) = output_extent(h, conv.kh, conv.stride, conv.padding)
                    .ok_or_else(|| infer_error(&n.name, "spatial underflow"))?;
                let (ow, _) = output_extent(w, conv.kw, conv.stride, conv.padding)
                    .ok_or_else(|| infer_error(&n.name, "spatial underflow"))?;
                Shape::Map { h: oh, w: ow, c: conv.c_out }
            }
            Layer::BasisScalingConv(b) => {
                let (h, w, c) = map(single()?)?;
                if c != b.rank || b.scale.len() != b.rank {
                    return Err(infer_error(
                        &n.name,
                        format!("rank {} but input has {c} channels, s has {}", b.rank, b.scale.len()),
                    ));
                }
                if let Some(vt) = &b.vbar_t {
                    if (vt.rows(), vt.cols()) != (b.rank, b.c_out) {
                        return Err(infer_error(&n.name, "V̄ᵀ shape differs from rank × c_out"));
                    }
                }
                Shape::Map { h, w, c: b.c_out }
            }
            Layer::BatchNorm(bn) => {
                let s = single()?;
                if s.channels() != bn.channels() {
                    return Err(infer_error(
                        &n.name,
                        format!("{} parameters for {} channels", bn.channels(), s.channels()),
                    ));
                }
                s
            }
            Layer::Relu => single()?,
            Layer::Pool {
                size,
                stride,
                padding,
                ..
            } => {
                let (h, w, c) = map(single()?)?;
                let (oh, _) = output_extent(h, *size, *stride, *padding)
                    .ok_or_else(|| infer_error(&n.name, "spatial underflow"))?;
                let (ow, _) = output_extent(w, *size, *stride, *padding)
                    .ok_or_else(|| infer_error(&n.name, "spatial underflow"))?;
                Shape::Map { h: oh, w: ow, c }
            }
            Layer::GlobalAvgPool => Shape::Flat(map(single()?)?.2),
            Layer::Add => {
                let first = *ins
                    .first()
                    .ok_or_else(|| infer_error(&n.name, "add without inputs"))?;
                if ins.len() < 2 || ins.iter().any(|s| *s != first) {
                    return Err(infer_error(&n.name, format!("add inputs differ: {ins:?}")));
                }
                first
            }
            Layer::Concat => {
                if ins.is_empty() {
                    return Err(infer_error(&n.name, "concat without inputs"));
                }
                let (h, w, _) = map(ins[0])?;
                let mut c = 0;
                for s in &ins {
                    let (hi, wi, ci) = map(*s)?;
                    if (hi, wi) != (h, w) {
                        return Err(infer_error(&n.name, format!("concat spatial mismatch: {ins:?}")));
                    }
                    c += ci;
                }
                Shape::Map { h, w, c }
            }
            Layer::Dense(d) => {
                let s = single()?;
                let Shape::Flat(k) = s else {
                    return Err(infer_error(&n.name, "dense expects a flat input"));
                };
                if k != d.inputs() || d.bias.len() != d.outputs() {
                    return Err(infer_error(
                        &n.name,
                        format!("dense weight {:?} for {k} inputs", d.weight.shape()),
                    ));
                }
                Shape::Flat(d.outputs())
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Incremental node-list assembly used by templates and surgery.
#[derive(Debug, Default)]
pub struct GraphBuilder<T: Scalar = f32> {
    nodes: Vec<LayerNode<T>>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn push(&mut self, node: LayerNode<T>) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn add(&mut self, name: impl Into<String>, layer: Layer<T>, inputs: &[NodeId]) -> NodeId {
        self.push(LayerNode::new(name, layer, inputs.to_vec()))
    }

    pub fn node(&self, id: NodeId) -> &LayerNode<T> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output shape of a node built so far.
    pub fn shape_of(&self, id: NodeId) -> Result<Shape> {
        Ok(infer_shapes(&self.nodes[..=id])?[id])
    }

    pub fn finish(self, output: NodeId) -> Result<NetGraph<T>> {
        NetGraph::new(self.nodes, output)
    }
}
