//! Splitting convolutions into a frozen basis convolution `U` followed by a
//! [`BasisScalingConv`] holding the trainable factors `s` and the frozen
//! `V̄ᵀ = diag(σ)·Vᵀ`, and fusing such pairs back into single convolutions.

use rayon::prelude::*;

use crate::error::{shape_mismatch, Error, Result};
use crate::factorization::{compact_svd, reshape_weights, unreshape_weights};
use crate::graph::{BasisScalingConv, Conv, Layer, LayerNode, NetGraph, NodeId};
use crate::linalg::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial value of the scaling factors for training runs.
pub const S_INIT: f64 = 0.5;

/// Suffix appended to a convolution's name to name its basis half. The
/// scaling half keeps the original name.
pub const BASIS_SUFFIX: &str = "_basis";

/// Decomposes one convolution. Count-only convolutions (no kernel) yield a
/// count-only pair of rank `min(kh·kw·c_in, c_out)`.
pub fn decompose_conv<T: Scalar>(conv: &Conv<T>, s_init: T) -> Result<(Conv<T>, BasisScalingConv<T>)> {
    if conv.basis {
        return Err(Error::AlreadyDecomposed("convolution is already a basis layer".into()));
    }
    if s_init < T::zero() {
        return Err(Error::InvalidArgument(format!("s_init must be non-negative, got {s_init}")));
    }
    let (u, vbar_t, rank) = match &conv.kernel {
        Some(kernel) => {
            let w = reshape_weights(kernel)?;
            if w.frobenius_norm() == 0.0 {
                return Err(Error::DegenerateWeight("all-zero kernel".into()));
            }
            let f = compact_svd(&w)?;
            let rank = f.rank();
            let u = unreshape_weights(&f.u, conv.kh, conv.kw, conv.c_in)?;
            (Some(u), Some(f.scaled_vt()), rank)
        }
        None => (None, None, conv.patch_len().min(conv.c_out)),
    };
    let basis = Conv {
        kh: conv.kh,
        kw: conv.kw,
        c_in: conv.c_in,
        c_out: rank,
        stride: conv.stride,
        padding: conv.padding,
        kernel: u,
        bias: None,
        basis: true,
    };
    let scaling = BasisScalingConv {
        rank,
        c_out: conv.c_out,
        scale: vec![s_init; rank],
        vbar_t,
        bias: conv.bias.clone(),
    };
    Ok((basis, scaling))
}

/// `(z ⊙ s) · V̄ᵀ + bias`, applied per pixel.
pub fn basis_scaling_forward<T: Scalar>(z: &Tensor<T>, layer: &BasisScalingConv<T>) -> Result<Tensor<T>> {
    let vt = layer
        .vbar_t
        .as_ref()
        .ok_or_else(|| Error::Unmaterialized("basis scaling layer".into()))?;
    if z.rank() == 0 || z.channels() != layer.rank || vt.rows() != layer.rank || vt.cols() != layer.c_out {
        return Err(shape_mismatch("basis_scaling_forward", z.shape(), &[vt.rows(), vt.cols()]));
    }
    let rows = z.len().checked_div(layer.rank).unwrap_or(0);
    let scaled: Vec<T> = z
        .data()
        .chunks_exact(layer.rank.max(1))
        .flat_map(|row| row.iter().zip(&layer.scale).map(|(&a, &s)| a * s))
        .collect();
    let mut out = vec![T::zero(); rows * layer.c_out];
    if let Some(bias) = &layer.bias {
        for row in out.chunks_exact_mut(layer.c_out.max(1)) {
            row.copy_from_slice(bias);
        }
    }
    gemm(&scaled, vt.data(), &mut out, rows, layer.rank, layer.c_out);
    let mut shape = z.shape().to_vec();
    *shape.last_mut().expect("rank checked above") = layer.c_out;
    Tensor::new(shape, out)
}

/// Rebuilds the single convolution with kernel `U·diag(s)·V̄ᵀ` and the
/// original bias.
pub fn fuse_pair<T: Scalar>(basis: &Conv<T>, scaling: &BasisScalingConv<T>) -> Result<Conv<T>> {
    if !basis.basis || basis.c_out != scaling.rank || scaling.scale.len() != scaling.rank {
        return Err(Error::InvalidArgument(format!(
            "not a decomposed pair: basis width {} vs scaling rank {}",
            basis.c_out, scaling.rank
        )));
    }
    let kernel = match (&basis.kernel, &scaling.vbar_t) {
        (Some(u), Some(vt)) => {
            let u = reshape_weights(u)?;
            let w = u.scale_columns(&scaling.scale).matmul(vt)?;
            Some(unreshape_weights(&w, basis.kh, basis.kw, basis.c_in)?)
        }
        (None, None) => None,
        _ => return Err(Error::Unmaterialized("partially materialized pair".into())),
    };
    Ok(Conv {
        kh: basis.kh,
        kw: basis.kw,
        c_in: basis.c_in,
        c_out: scaling.c_out,
        stride: basis.stride,
        padding: basis.padding,
        kernel,
        bias: scaling.bias.clone(),
        basis: false,
    })
}

/// Decomposes every convolution of `g`, shortcut and 1×1 convolutions
/// included. Factorizations run in parallel; splicing is sequential.
pub fn decompose_all<T: Scalar>(g: &NetGraph<T>, s_init: T) -> Result<NetGraph<T>> {
    if g.is_decomposed() {
        return Err(Error::AlreadyDecomposed("graph already contains basis layers".into()));
    }
    let convs: Vec<NodeId> = (0..g.len())
        .filter(|&id| matches!(g.node(id).layer, Layer::Conv(_)))
        .collect();
    let pairs: Vec<(Conv<T>, BasisScalingConv<T>)> = convs
        .par_iter()
        .map(|&id| match &g.node(id).layer {
            Layer::Conv(c) => decompose_conv(c, s_init).map_err(|e| match e {
                Error::DegenerateWeight(_) => Error::DegenerateWeight(g.node(id).name.clone()),
                other => other,
            }),
            _ => unreachable!("filtered to convolutions"),
        })
        .collect::<Result<_>>()?;
    let mut pairs = pairs.into_iter();

    let mut remap: Vec<NodeId> = Vec::with_capacity(g.len());
    let mut nodes: Vec<LayerNode<T>> = Vec::with_capacity(g.len() + convs.len());
    for n in g.nodes() {
        let inputs: Vec<NodeId> = n.inputs.iter().map(|&i| remap[i]).collect();
        if let Layer::Conv(_) = n.layer {
            let (basis, scaling) = pairs.next().expect("one pair per convolution");
            let mut u = LayerNode::new(format!("{}{BASIS_SUFFIX}", n.name), Layer::Conv(basis), inputs);
            u.trainable = false;
            nodes.push(u);
            let mut b = LayerNode::new(n.name.clone(), Layer::BasisScalingConv(scaling), vec![nodes.len() - 1]);
            b.trainable = true;
            nodes.push(b);
        } else {
            let mut copy = n.clone();
            copy.inputs = inputs;
            nodes.push(copy);
        }
        remap.push(nodes.len() - 1);
    }
    NetGraph::new(nodes, remap[g.output()])
}

/// Replaces every decomposed pair with its fused convolution.
pub fn fuse_all<T: Scalar>(g: &NetGraph<T>) -> Result<NetGraph<T>> {
    let mut remap: Vec<NodeId> = Vec::with_capacity(g.len());
    let mut nodes: Vec<LayerNode<T>> = Vec::with_capacity(g.len());
    for n in g.nodes() {
        match &n.layer {
            Layer::Conv(c) if c.basis => {
                // Folded into the scaling node that consumes it.
                remap.push(usize::MAX);
                continue;
            }
            Layer::BasisScalingConv(s) => {
                let u_id = n.inputs[0];
                let u_node = g.node(u_id);
                let Layer::Conv(u) = &u_node.layer else {
                    return Err(Error::Graph(format!("{} is not fed by a basis convolution", n.name)));
                };
                let fused = fuse_pair(u, s)?;
                let inputs = u_node.inputs.iter().map(|&i| remap[i]).collect();
                let mut node = LayerNode::new(n.name.clone(), Layer::Conv(fused), inputs);
                node.trainable = false;
                nodes.push(node);
            }
            _ => {
                let mut copy = n.clone();
                copy.inputs = n.inputs.iter().map(|&i| remap[i]).collect();
                if copy.inputs.contains(&usize::MAX) {
                    return Err(Error::Graph(format!("{} consumes a basis convolution directly", n.name)));
                }
                nodes.push(copy);
            }
        }
        remap.push(nodes.len() - 1);
    }
    NetGraph::new(nodes, remap[g.output()])
}

/// Total parameter growth `Σ (k·r + r·co + r − k·co)` implied by
/// decomposing every convolution of `g`.
pub fn decomposition_growth<T: Scalar>(g: &NetGraph<T>) -> i64 {
    g.nodes()
        .iter()
        .filter_map(|n| match &n.layer {
            Layer::Conv(c) if !c.basis => {
                let k = c.patch_len() as i64;
                let co = c.c_out as i64;
                let r = k.min(co);
                Some(k * r + r * co + r - k * co)
            }
            _ => None,
        })
        .sum()
}
