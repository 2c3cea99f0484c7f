//! Parameter and FLOP accounting. One multiply-accumulate counts as one
//! FLOP; batch-norm, activations, pooling, and merges are free.

use super::{Layer, NetGraph, Shape};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub trainable: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    pub trainable_params: u64,
}

impl CostReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

fn spatial(shape: Shape) -> u64 {
    match shape {
        Shape::Map { h, w, .. } => (h * w) as u64,
        Shape::Flat(_) => 1,
    }
}

/// Per-layer and total parameters, trainable parameters, and FLOPs at the
/// graph's own input extent.
pub fn cost_report<T: Scalar>(g: &NetGraph<T>) -> CostReport {
    let mut report = CostReport::default();
    for (id, n) in g.nodes().iter().enumerate() {
        let out = g.shape(id);
        let (params, trainable, flops) = match &n.layer {
            Layer::Conv(c) => (
                c.param_count(),
                0,
                spatial(out) * (c.patch_len() * c.c_out) as u64,
            ),
            Layer::BasisScalingConv(b) => (
                b.param_count(),
                if n.trainable { b.rank as u64 } else { 0 },
                spatial(out) * (b.rank * b.c_out) as u64,
            ),
            Layer::BatchNorm(bn) => {
                let c = bn.channels() as u64;
                (4 * c, if n.trainable { 2 * c } else { 0 }, 0)
            }
            Layer::Dense(d) => {
                let p = ((d.inputs() + 1) * d.outputs()) as u64;
                (p, if n.trainable { p } else { 0 }, (d.inputs() * d.outputs()) as u64)
            }
            _ => continue,
        };
        report.total_params += params;
        report.trainable_params += trainable;
        report.total_flops += flops;
        report.layers.push(LayerCost {
            name: n.name.clone(),
            kind: n.layer.kind_name(),
            params,
            trainable,
            flops,
        });
    }
    report
}

pub fn count_params<T: Scalar>(g: &NetGraph<T>) -> CostReport {
    cost_report(g)
}

/// FLOPs at the given input extent (defaults to the graph's own).
pub fn count_flops<T: Scalar>(g: &NetGraph<T>, input: Option<(usize, usize)>) -> Result<CostReport> {
    match input {
        Some((h, w)) if (h, w) != (g.input_extent().0, g.input_extent().1) => {
            Ok(cost_report(&g.with_input_extent(h, w)?))
        }
        _ => Ok(cost_report(g)),
    }
}

pub fn trainable_param_count<T: Scalar>(g: &NetGraph<T>) -> u64 {
    cost_report(g).trainable_params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ops::Padding;
    use crate::graph::{Conv, GraphBuilder, Layer};

    #[test]
    fn single_valid_conv_flops() {
        let mut b = GraphBuilder::<f32>::new();
        let x = b.add("input", Layer::Input { h: 4, w: 4, c: 1 }, &[]);
        let conv = Conv {
            kh: 3,
            kw: 3,
            c_in: 1,
            c_out: 1,
            stride: 1,
            padding: Padding::Valid,
            kernel: None,
            bias: None,
            basis: false,
        };
        let c = b.add("c", Layer::Conv(conv), &[x]);
        let g = b.finish(c).unwrap();
        let r = cost_report(&g);
        assert_eq!(r.total_flops, 36);
        assert_eq!(r.total_params, 9);
    }

    #[test]
    fn input_only_graph_costs_nothing() {
        let mut b = GraphBuilder::<f32>::new();
        let x = b.add("input", Layer::Input { h: 4, w: 4, c: 1 }, &[]);
        let g = b.finish(x).unwrap();
        assert_eq!(cost_report(&g), CostReport::default());
    }
}
