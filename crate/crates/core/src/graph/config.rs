//! Architecture configuration files (JSON, `format: 1`).
//!
//! ```json
//! { "format": 1, "template": "tiny_vgg", "input": [16, 16, 1], "num_classes": 2 }
//! ```
//!
//! or an explicit layer list, each layer consuming the previous one unless
//! `inputs` names its producers:
//!
//! ```json
//! { "format": 1, "input": [8, 8, 1], "num_classes": 10,
//!   "layers": [ { "name": "c1", "kind": "conv", "kernel": 3, "filters": 4 } ] }
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::templates::{Assembler, WeightInit};
use super::{NetGraph, NodeId};
use crate::engine::ops::{Padding, PoolKind};
use crate::error::{Error, IoAt, Result};
use crate::scalar::Scalar;

pub const ARCH_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    /// `[h, w, c]`; templates fall back to their default extent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 3]>,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn template(name: &str, input: Option<[usize; 3]>, num_classes: usize) -> Self {
        Self {
            format: ARCH_FORMAT,
            template: Some(name.to_string()),
            layers: None,
            input,
            num_classes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != ARCH_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported architecture format {} (this build reads format {ARCH_FORMAT})",
                self.format
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSize {
    Square(usize),
    Rect([usize; 2]),
}

impl KernelSize {
    pub fn dims(self) -> [usize; 2] {
        match self {
            KernelSize::Square(k) => [k, k],
            KernelSize::Rect(hw) => hw,
        }
    }
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

fn valid() -> Padding {
    Padding::Valid
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpecKind {
    Conv {
        kernel: KernelSize,
        filters: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default = "yes")]
        bias: bool,
    },
    Bn,
    Relu,
    Maxpool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default = "valid")]
        padding: Padding,
    },
    Avgpool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default = "valid")]
        padding: Padding,
    },
    GlobalAvgPool,
    Add,
    Concat,
    Dense {
        units: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    #[serde(flatten)]
    pub kind: LayerSpecKind,
}

pub(crate) fn build_explicit<T: Scalar>(
    layers: &[LayerSpec],
    input: [usize; 3],
    num_classes: usize,
    init: WeightInit,
) -> Result<NetGraph<T>> {
    let mut a = Assembler::<T>::new(input, init);
    let mut ids: HashMap<String, NodeId> = HashMap::from([("input".to_string(), 0)]);
    let mut prev = 0;
    let mut has_dense = false;
    for (i, spec) in layers.iter().enumerate() {
        let name = spec
            .name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", kind_tag(&spec.kind), i + 1));
        if ids.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate layer name {name}")));
        }
        let inputs: Vec<NodeId> = match &spec.inputs {
            Some(names) => names
                .iter()
                .map(|n| {
                    ids.get(n).copied().ok_or_else(|| Error::ShapeInference {
                        node: name.clone(),
                        reason: format!("unknown input {n}"),
                    })
                })
                .collect::<Result<_>>()?,
            None => vec![prev],
        };
        let single = || -> Result<NodeId> {
            if inputs.len() == 1 {
                Ok(inputs[0])
            } else {
                Err(Error::ShapeInference {
                    node: name.clone(),
                    reason: format!("expects one input, got {}", inputs.len()),
                })
            }
        };
        let id = match &spec.kind {
            LayerSpecKind::Conv {
                kernel,
                filters,
                stride,
                padding,
                bias,
            } => a.conv_hw(&name, single()?, kernel.dims(), *filters, *stride, *padding, *bias),
            LayerSpecKind::Bn => a.bn(&name, single()?),
            LayerSpecKind::Relu => a.relu(&name, single()?),
            LayerSpecKind::Maxpool {
                size,
                stride,
                padding,
            } => a.pool(&name, single()?, PoolKind::Max, *size, stride.unwrap_or(*size), *padding),
            LayerSpecKind::Avgpool {
                size,
                stride,
                padding,
            } => a.pool(&name, single()?, PoolKind::Avg, *size, stride.unwrap_or(*size), *padding),
            LayerSpecKind::GlobalAvgPool => a.gap(&name, single()?),
            LayerSpecKind::Add => a.add(&name, &inputs),
            LayerSpecKind::Concat => a.concat(&name, &inputs),
            LayerSpecKind::Dense { units } => {
                has_dense = true;
                a.dense(&name, single()?, *units)
            }
        };
        // Surface shape errors at the offending node.
        a.b.shape_of(id)?;
        ids.insert(name, id);
        prev = id;
    }
    if !has_dense {
        let pooled = a.gap("avg_pool", prev);
        prev = a.dense("predictions", pooled, num_classes);
    }
    let out = a.last();
    debug_assert_eq!(out, prev);
    a.b.finish(out)
}

fn kind_tag(kind: &LayerSpecKind) -> &'static str {
    match kind {
        LayerSpecKind::Conv { .. } => "conv",
        LayerSpecKind::Bn => "bn",
        LayerSpecKind::Relu => "relu",
        LayerSpecKind::Maxpool { .. } => "maxpool",
        LayerSpecKind::Avgpool { .. } => "avgpool",
        LayerSpecKind::GlobalAvgPool => "global_avg_pool",
        LayerSpecKind::Add => "add",
        LayerSpecKind::Concat => "concat",
        LayerSpecKind::Dense { .. } => "dense",
    }
}
