//! Built-in architectures: the three counting-scale feature extractors
//! (VGG-16, ResNet-50, DenseNet-121, laid out like their common Keras
//! implementations) and small trainable variants of each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{ArchConfig, Conv, Dense, GraphBuilder, Layer, NetGraph, NodeId};
use crate::engine::ops::{BatchNorm, Padding, PoolKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Vgg16,
    ResNet50,
    DenseNet121,
    TinyVgg,
    TinyResNet,
    TinyDenseNet,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Vgg16,
        Template::ResNet50,
        Template::DenseNet121,
        Template::TinyVgg,
        Template::TinyResNet,
        Template::TinyDenseNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Vgg16 => "vgg16",
            Template::ResNet50 => "resnet50",
            Template::DenseNet121 => "densenet121",
            Template::TinyVgg => "tiny_vgg",
            Template::TinyResNet => "tiny_resnet",
            Template::TinyDenseNet => "tiny_densenet",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownTemplate(name.to_string()))
    }

    /// Input extent used when none is given.
    pub fn default_input(self) -> [usize; 3] {
        match self {
            Template::Vgg16 | Template::ResNet50 | Template::DenseNet121 => [128, 128, 3],
            _ => [16, 16, 1],
        }
    }
}

/// How parameters are filled at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// He-normal kernels, zero biases, Glorot-uniform classifier.
    HeNormal { seed: u64 },
    /// Structure only: convolution kernels are left unmaterialized.
    /// Enough for parameter and FLOP accounting.
    ShapeOnly,
}

/// Node-list builder that tracks channel counts and draws weights.
pub(crate) struct Assembler<T: Scalar> {
    pub(crate) b: GraphBuilder<T>,
    channels: Vec<usize>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Assembler<T> {
    pub(crate) fn new(input: [usize; 3], init: WeightInit) -> Self {
        let mut b = GraphBuilder::new();
        b.add(
            "input",
            Layer::Input {
                h: input[0],
                w: input[1],
                c: input[2],
            },
            &[],
        );
        let rng = match init {
            WeightInit::HeNormal { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            WeightInit::ShapeOnly => None,
        };
        Self {
            b,
            channels: vec![input[2]],
            rng,
        }
    }

    pub(crate) fn channels(&self, id: NodeId) -> usize {
        self.channels[id]
    }

    fn push(&mut self, name: &str, layer: Layer<T>, inputs: &[NodeId], c: usize) -> NodeId {
        self.channels.push(c);
        self.b.add(name, layer, inputs)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv(
        &mut self,
        name: &str,
        input: NodeId,
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> NodeId {
        self.conv_hw(name, input, [kernel, kernel], filters, stride, padding, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv_hw(
        &mut self,
        name: &str,
        input: NodeId,
        [kh, kw]: [usize; 2],
        filters: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> NodeId {
        let c_in = self.channels[input];
        let fan_in = kh * kw * c_in;
        let kernel_tensor = self.rng.as_mut().map(|rng| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            Tensor::from_fn(&[kh, kw, c_in, filters], |_| T::from_f64(normal.sample(rng)))
        });
        let conv = Conv {
            kh,
            kw,
            c_in,
            c_out: filters,
            stride,
            padding,
            kernel: kernel_tensor,
            bias: bias.then(|| vec![T::zero(); filters]),
            basis: false,
        };
        self.push(name, Layer::Conv(conv), &[input], filters)
    }

    pub(crate) fn bn(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels[input];
        self.push(name, Layer::BatchNorm(BatchNorm::new(c)), &[input], c)
    }

    pub(crate) fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels[input];
        self.push(name, Layer::Relu, &[input], c)
    }

    pub(crate) fn pool(
        &mut self,
        name: &str,
        input: NodeId,
        kind: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    ) -> NodeId {
        let c = self.channels[input];
        let layer = Layer::Pool {
            kind,
            size,
            stride,
            padding,
        };
        self.push(name, layer, &[input], c)
    }

    pub(crate) fn add(&mut self, name: &str, inputs: &[NodeId]) -> NodeId {
        let c = self.channels[inputs[0]];
        self.push(name, Layer::Add, inputs, c)
    }

    pub(crate) fn concat(&mut self, name: &str, inputs: &[NodeId]) -> NodeId {
        let c = inputs.iter().map(|&i| self.channels[i]).sum();
        self.push(name, Layer::Concat, inputs, c)
    }

    pub(crate) fn gap(&mut self, name: &str, input: NodeId) -> NodeId {
        let c = self.channels[input];
        self.push(name, Layer::GlobalAvgPool, &[input], c)
    }

    pub(crate) fn dense(&mut self, name: &str, input: NodeId, units: usize) -> NodeId {
        let c_in = self.channels[input];
        let dense = glorot_dense(c_in, units, self.rng.as_mut());
        self.push(name, Layer::Dense(dense), &[input], units)
    }

    pub(crate) fn last(&self) -> NodeId {
        self.b.len() - 1
    }
}

/// Glorot-uniform classifier; all-zero weights when no RNG is supplied.
pub(crate) fn glorot_dense<T: Scalar>(inputs: usize, outputs: usize, rng: Option<&mut ChaCha8Rng>) -> Dense<T> {
    let weight = match rng {
        Some(rng) => {
            let limit = (6.0 / (inputs + outputs) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
            Tensor::from_fn(&[inputs, outputs], |_| T::from_f64(dist.sample(rng)))
        }
        None => Tensor::zeros(&[inputs, outputs]),
    };
    Dense {
        weight,
        bias: vec![T::zero(); outputs],
    }
}

fn vgg16<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut x = 0;
    for (bi, &(filters, depth)) in blocks.iter().enumerate() {
        for li in 0..depth {
            let name = format!("block{}_conv{}", bi + 1, li + 1);
            x = a.conv(&name, x, 3, filters, 1, Padding::Same, true);
            x = a.relu(&format!("{name}_relu"), x);
        }
        x = a.pool(&format!("block{}_pool", bi + 1), x, PoolKind::Max, 2, 2, Padding::Valid);
    }
    x
}

fn tiny_vgg<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let mut x = 0;
    for (bi, filters) in [8usize, 16].into_iter().enumerate() {
        for li in 0..2 {
            let name = format!("block{}_conv{}", bi + 1, li + 1);
            x = a.conv(&name, x, 3, filters, 1, Padding::Same, true);
            x = a.relu(&format!("{name}_relu"), x);
        }
        x = a.pool(&format!("block{}_pool", bi + 1), x, PoolKind::Max, 2, 2, Padding::Valid);
    }
    x
}

/// Bottleneck block: 1×1 → 3×3 → 1×1 with an identity or projection
/// shortcut, strided on the first 1×1 as in the Keras layout.
fn bottleneck<T: Scalar>(
    a: &mut Assembler<T>,
    input: NodeId,
    name: &str,
    filters: [usize; 3],
    stride: usize,
    project: bool,
) -> NodeId {
    let mut x = a.conv(&format!("{name}_1_conv"), input, 1, filters[0], stride, Padding::Valid, true);
    x = a.bn(&format!("{name}_1_bn"), x);
    x = a.relu(&format!("{name}_1_relu"), x);
    x = a.conv(&format!("{name}_2_conv"), x, 3, filters[1], 1, Padding::Same, true);
    x = a.bn(&format!("{name}_2_bn"), x);
    x = a.relu(&format!("{name}_2_relu"), x);
    x = a.conv(&format!("{name}_3_conv"), x, 1, filters[2], 1, Padding::Valid, true);
    x = a.bn(&format!("{name}_3_bn"), x);
    let shortcut = if project {
        let s = a.conv(&format!("{name}_0_conv"), input, 1, filters[2], stride, Padding::Valid, true);
        a.bn(&format!("{name}_0_bn"), s)
    } else {
        input
    };
    let sum = a.add(&format!("{name}_add"), &[shortcut, x]);
    a.relu(&format!("{name}_out"), sum)
}

fn resnet50<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let mut x = a.conv("conv1_conv", 0, 7, 64, 2, Padding::Same, true);
    x = a.bn("conv1_bn", x);
    x = a.relu("conv1_relu", x);
    x = a.pool("pool1_pool", x, PoolKind::Max, 3, 2, Padding::Same);
    let stages: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
    for (si, &(width, blocks, stride)) in stages.iter().enumerate() {
        for bi in 0..blocks {
            let name = format!("conv{}_block{}", si + 2, bi + 1);
            let (s, project) = if bi == 0 { (stride, true) } else { (1, false) };
            x = bottleneck(a, x, &name, [width, width, 4 * width], s, project);
        }
    }
    x
}

fn tiny_resnet<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let mut x = a.conv("conv1_conv", 0, 3, 16, 1, Padding::Same, true);
    x = a.bn("conv1_bn", x);
    x = a.relu("conv1_relu", x);
    x = bottleneck(a, x, "conv2_block1", [8, 8, 16], 1, false);
    bottleneck(a, x, "conv3_block1", [16, 16, 32], 2, true)
}

fn dense_block<T: Scalar>(a: &mut Assembler<T>, mut x: NodeId, name: &str, layers: usize, growth: usize) -> NodeId {
    for i in 0..layers {
        let p = format!("{name}_block{}", i + 1);
        let mut y = a.bn(&format!("{p}_0_bn"), x);
        y = a.relu(&format!("{p}_0_relu"), y);
        y = a.conv(&format!("{p}_1_conv"), y, 1, 4 * growth, 1, Padding::Valid, false);
        y = a.bn(&format!("{p}_1_bn"), y);
        y = a.relu(&format!("{p}_1_relu"), y);
        y = a.conv(&format!("{p}_2_conv"), y, 3, growth, 1, Padding::Same, false);
        x = a.concat(&format!("{p}_concat"), &[x, y]);
    }
    x
}

fn transition<T: Scalar>(a: &mut Assembler<T>, x: NodeId, name: &str) -> NodeId {
    let c = a.channels(x) / 2;
    let mut y = a.bn(&format!("{name}_bn"), x);
    y = a.relu(&format!("{name}_relu"), y);
    y = a.conv(&format!("{name}_conv"), y, 1, c, 1, Padding::Valid, false);
    a.pool(&format!("{name}_pool"), y, PoolKind::Avg, 2, 2, Padding::Valid)
}

fn densenet121<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let mut x = a.conv("conv1_conv", 0, 7, 64, 2, Padding::Same, false);
    x = a.bn("conv1_bn", x);
    x = a.relu("conv1_relu", x);
    x = a.pool("pool1", x, PoolKind::Max, 3, 2, Padding::Same);
    let blocks = [6usize, 12, 24, 16];
    for (i, &n) in blocks.iter().enumerate() {
        x = dense_block(a, x, &format!("conv{}", i + 2), n, 32);
        if i + 1 < blocks.len() {
            x = transition(a, x, &format!("pool{}", i + 2));
        }
    }
    x = a.bn("bn", x);
    a.relu("relu", x)
}

fn tiny_densenet<T: Scalar>(a: &mut Assembler<T>) -> NodeId {
    let mut x = a.conv("conv1_conv", 0, 3, 16, 1, Padding::Same, false);
    x = a.bn("conv1_bn", x);
    x = a.relu("conv1_relu", x);
    x = dense_block(a, x, "conv2", 3, 4);
    x = transition(a, x, "pool2");
    x = dense_block(a, x, "conv3", 2, 4);
    x = a.bn("bn", x);
    a.relu("relu", x)
}

/// Builds a template's feature extractor followed by a global-average-pool
/// and dense classifier head.
pub fn build_template<T: Scalar>(
    template: Template,
    input: [usize; 3],
    num_classes: usize,
    init: WeightInit,
) -> Result<NetGraph<T>> {
    let mut a = Assembler::new(input, init);
    let features = match template {
        Template::Vgg16 => vgg16(&mut a),
        Template::ResNet50 => resnet50(&mut a),
        Template::DenseNet121 => densenet121(&mut a),
        Template::TinyVgg => tiny_vgg(&mut a),
        Template::TinyResNet => tiny_resnet(&mut a),
        Template::TinyDenseNet => tiny_densenet(&mut a),
    };
    let pooled = a.gap("avg_pool", features);
    let out = a.dense("predictions", pooled, num_classes);
    a.b.finish(out)
}

/// Builds the graph an architecture config describes.
pub fn build_architecture<T: Scalar>(cfg: &ArchConfig, init: WeightInit) -> Result<NetGraph<T>> {
    cfg.validate()?;
    match (&cfg.template, &cfg.layers) {
        (Some(name), None) => {
            let t = Template::parse(name)?;
            build_template(t, cfg.input.unwrap_or(t.default_input()), cfg.num_classes, init)
        }
        (None, Some(layers)) => {
            let input = cfg
                .input
                .ok_or_else(|| Error::InvalidArgument("explicit layer list needs an input extent".into()))?;
            super::config::build_explicit(layers, input, cfg.num_classes, init)
        }
        _ => Err(Error::InvalidArgument(
            "architecture config needs exactly one of `template` or `layers`".into(),
        )),
    }
}
