//! Graph topology as JSON-compatible records plus named parameter tensors.
//! Used by checkpoints; the tensors travel separately in binary form.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{BasisScalingConv, Conv, Dense, Layer, LayerNode, NetGraph};
use crate::engine::ops::{BatchNorm, Padding, PoolKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TOPOLOGY_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub format: u32,
    pub output: String,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub name: String,
    pub inputs: Vec<String>,
    pub trainable: bool,
    #[serde(flatten)]
    pub layer: LayerRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    Input {
        h: usize,
        w: usize,
        c: usize,
    },
    Conv {
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        basis: bool,
    },
    BasisScalingConv {
        rank: usize,
        c_out: usize,
        bias: bool,
    },
    Bn {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Maxpool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    Avgpool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Add,
    Concat,
    Dense {
        in_features: usize,
        units: usize,
    },
}

impl<T: Scalar> NetGraph<T> {
    /// Topology record plus `(key, tensor)` pairs in node order.
    pub fn to_record(&self) -> (GraphRecord, Vec<(String, Tensor<T>)>) {
        let mut tensors = Vec::new();
        let mut put = |node: &str, field: &str, t: Tensor<T>| tensors.push((format!("{node}/{field}"), t));
        let nodes = self
            .nodes()
            .iter()
            .map(|n| {
                let layer = match &n.layer {
                    Layer::Input { h, w, c } => LayerRecord::Input { h: *h, w: *w, c: *c },
                    Layer::Conv(c) => {
                        if let Some(k) = &c.kernel {
                            put(&n.name, "kernel", k.clone());
                        }
                        if let Some(b) = &c.bias {
                            put(&n.name, "bias", Tensor::from_vec(b.clone()));
                        }
                        LayerRecord::Conv {
                            kh: c.kh,
                            kw: c.kw,
                            c_in: c.c_in,
                            c_out: c.c_out,
                            stride: c.stride,
                            padding: c.padding,
                            bias: c.bias.is_some(),
                            basis: c.basis,
                        }
                    }
                    Layer::BasisScalingConv(b) => {
                        put(&n.name, "scale", Tensor::from_vec(b.scale.clone()));
                        if let Some(vt) = &b.vbar_t {
                            let t = Tensor::new(vec![vt.rows(), vt.cols()], vt.data().to_vec())
                                .expect("matrix extents");
                            put(&n.name, "vbar_t", t);
                        }
                        if let Some(bias) = &b.bias {
                            put(&n.name, "bias", Tensor::from_vec(bias.clone()));
                        }
                        LayerRecord::BasisScalingConv {
                            rank: b.rank,
                            c_out: b.c_out,
                            bias: b.bias.is_some(),
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        put(&n.name, "gamma", Tensor::from_vec(bn.gamma.clone()));
                        put(&n.name, "beta", Tensor::from_vec(bn.beta.clone()));
                        put(&n.name, "running_mean", Tensor::from_vec(bn.running_mean.clone()));
                        put(&n.name, "running_var", Tensor::from_vec(bn.running_var.clone()));
                        LayerRecord::Bn {
                            channels: bn.channels(),
                            eps: bn.eps,
                            momentum: bn.momentum,
                        }
                    }
                    Layer::Relu => LayerRecord::Relu,
                    Layer::Pool {
                        kind,
                        size,
                        stride,
                        padding,
                    } => {
                        let (size, stride, padding) = (*size, *stride, *padding);
                        match kind {
                            PoolKind::Max => LayerRecord::Maxpool { size, stride, padding },
                            PoolKind::Avg => LayerRecord::Avgpool { size, stride, padding },
                        }
                    }
                    Layer::GlobalAvgPool => LayerRecord::GlobalAvgPool,
                    Layer::Add => LayerRecord::Add,
                    Layer::Concat => LayerRecord::Concat,
                    Layer::Dense(d) => {
                        put(&n.name, "weight", d.weight.clone());
                        put(&n.name, "bias", Tensor::from_vec(d.bias.clone()));
                        LayerRecord::Dense {
                            in_features: d.inputs(),
                            units: d.outputs(),
                        }
                    }
                };
                NodeRecord {
                    name: n.name.clone(),
                    inputs: n.inputs.iter().map(|&i| self.node(i).name.clone()).collect(),
                    trainable: n.trainable,
                    layer,
                }
            })
            .collect();
        let record = GraphRecord {
            format: TOPOLOGY_FORMAT,
            output: self.node(self.output()).name.clone(),
            nodes,
        };
        (record, tensors)
    }

    /// Rebuilds a graph, consuming the tensors it references.
    pub fn from_record(record: &GraphRecord, tensors: &mut HashMap<String, Tensor<T>>) -> Result<Self> {
        if record.format != TOPOLOGY_FORMAT {
            return Err(Error::Format(format!(
                "topology format {} is not supported (expected {TOPOLOGY_FORMAT})",
                record.format
            )));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut nodes = Vec::with_capacity(record.nodes.len());
        for (id, r) in record.nodes.iter().enumerate() {
            let inputs = r
                .inputs
                .iter()
                .map(|name| {
                    index
                        .get(name.as_str())
                        .copied()
                        .ok_or_else(|| Error::Format(format!("node {} references unknown {name}", r.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut take = |field: &str| tensors.remove(&format!("{}/{field}", r.name));
            let vec_of = |t: Option<Tensor<T>>, field: &str| -> Result<Vec<T>> {
                t.map(Tensor::into_data)
                    .ok_or_else(|| Error::Format(format!("missing tensor {}/{field}", r.name)))
            };
            let layer = match &r.layer {
                LayerRecord::Input { h, w, c } => Layer::Input { h: *h, w: *w, c: *c },
                LayerRecord::Conv {
                    kh,
                    kw,
                    c_in,
                    c_out,
                    stride,
                    padding,
                    bias,
                    basis,
                } => {
                    let kernel = take("kernel");
                    let bias = if *bias { Some(vec_of(take("bias"), "bias")?) } else { None };
                    Layer::Conv(Conv {
                        kh: *kh,
                        kw: *kw,
                        c_in: *c_in,
                        c_out: *c_out,
                        stride: *stride,
                        padding: *padding,
                        kernel,
                        bias,
                        basis: *basis,
                    })
                }
                LayerRecord::BasisScalingConv { rank, c_out, bias } => {
                    let scale = vec_of(take("scale"), "scale")?;
                    let vbar_t = take("vbar_t")
                        .map(|t| Matrix::from_vec(*rank, *c_out, t.into_data()))
                        .transpose()?;
                    let bias = if *bias { Some(vec_of(take("bias"), "bias")?) } else { None };
                    Layer::BasisScalingConv(BasisScalingConv {
                        rank: *rank,
                        c_out: *c_out,
                        scale,
                        vbar_t,
                        bias,
                    })
                }
                LayerRecord::Bn { eps, momentum, .. } => Layer::BatchNorm(BatchNorm {
                    gamma: vec_of(take("gamma"), "gamma")?,
                    beta: vec_of(take("beta"), "beta")?,
                    running_mean: vec_of(take("running_mean"), "running_mean")?,
                    running_var: vec_of(take("running_var"), "running_var")?,
                    eps: *eps,
                    momentum: *momentum,
                }),
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::Maxpool { size, stride, padding } => Layer::Pool {
                    kind: PoolKind::Max,
                    size: *size,
                    stride: *stride,
                    padding: *padding,
                },
                LayerRecord::Avgpool { size, stride, padding } => Layer::Pool {
                    kind: PoolKind::Avg,
                    size: *size,
                    stride: *stride,
                    padding: *padding,
                },
                LayerRecord::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerRecord::Add => Layer::Add,
                LayerRecord::Concat => Layer::Concat,
                LayerRecord::Dense { in_features, units } => {
                    let weight = take("weight")
                        .ok_or_else(|| Error::Format(format!("missing tensor {}/weight", r.name)))?;
                    if weight.shape() != [*in_features, *units] {
                        return Err(Error::Format(format!(
                            "dense {} weight has shape {:?}",
                            r.name,
                            weight.shape()
                        )));
                    }
                    Layer::Dense(Dense {
                        weight,
                        bias: vec_of(take("bias"), "bias")?,
                    })
                }
            };
            index.insert(r.name.as_str(), id);
            nodes.push(LayerNode {
                name: r.name.clone(),
                layer,
                inputs,
                trainable: r.trainable,
            });
        }
        let output = *index
            .get(record.output.as_str())
            .ok_or_else(|| Error::Format(format!("unknown output node {}", record.output)))?;
        NetGraph::new(nodes, output)
    }
}
