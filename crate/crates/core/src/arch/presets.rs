//! Built-in miniature architectures: a VGG-style chain, a basic-block
//! residual network and a depthwise-separable network.

use super::{ArchSpec, BlockKind, BlockSpec, LayerKind, LayerSpec, ARCH_SCHEMA};

/// Names accepted by [`by_name`].
pub const PRESET_NAMES: [&str; 3] = ["vgg-small", "resnet-tiny", "depthwise-tiny"];

/// Base widths of the eight VGG-small convolutions; `0` marks a 2×2 pool.
const VGG_SMALL: [usize; 10] = [8, 8, 0, 16, 16, 0, 32, 32, 32, 32];
const RESNET_STAGES: [usize; 3] = [8, 16, 32];
const RESNET_BLOCKS_PER_STAGE: usize = 2;
/// (pointwise width, depthwise stride) of each depthwise block.
const DEPTHWISE_BLOCKS: [(usize, usize); 4] = [(16, 1), (32, 2), (32, 1), (64, 2)];

pub fn by_name(name: &str, input_shape: [usize; 3], num_classes: usize) -> Option<ArchSpec> {
    match name {
        "vgg-small" => Some(vgg_small(input_shape, num_classes)),
        "resnet-tiny" => Some(resnet_tiny(input_shape, num_classes)),
        "depthwise-tiny" => Some(depthwise_tiny(input_shape, num_classes)),
        _ => None,
    }
}

#[derive(Default)]
pub(crate) struct Builder {
    layers: Vec<LayerSpec>,
    blocks: Vec<BlockSpec>,
}

impl Builder {
    pub(crate) fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.layers.push(LayerSpec { name: name.into(), kind, inputs });
        self.layers.len() - 1
    }

    fn after(&self, prev: Option<usize>) -> Vec<usize> {
        prev.map(|p| vec![p]).unwrap_or_default()
    }

    /// conv → BN (→ ReLU); returns the ids it created.
    pub(crate) fn conv_bn(
        &mut self,
        prefix: &str,
        prev: Option<usize>,
        channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Vec<usize> {
        let padding = kernel / 2;
        let conv = self.push(
            format!("{prefix}.conv"),
            LayerKind::Conv { channels, kernel, stride, padding },
            self.after(prev),
        );
        let bn = self.push(format!("{prefix}.bn"), LayerKind::BatchNorm, vec![conv]);
        let mut ids = vec![conv, bn];
        if relu {
            ids.push(self.push(format!("{prefix}.relu"), LayerKind::Relu, vec![bn]));
        }
        ids
    }

    pub(crate) fn dw_bn_relu(&mut self, prefix: &str, prev: usize, stride: usize) -> Vec<usize> {
        let dw = self.push(
            format!("{prefix}.dw"),
            LayerKind::DepthwiseConv { kernel: 3, stride, padding: 1 },
            vec![prev],
        );
        let bn = self.push(format!("{prefix}.dw_bn"), LayerKind::BatchNorm, vec![dw]);
        let relu = self.push(format!("{prefix}.dw_relu"), LayerKind::Relu, vec![bn]);
        vec![dw, bn, relu]
    }

    pub(crate) fn block(&mut self, kind: BlockKind, layers: Vec<usize>, shortcut: Vec<usize>) {
        self.blocks.push(BlockSpec { kind, layers, shortcut });
    }

    pub(crate) fn classifier(&mut self, prev: usize) {
        let pool = self.push("head.pool", LayerKind::GlobalPool, vec![prev]);
        self.push("head.fc", LayerKind::Linear, vec![pool]);
    }

    pub(crate) fn finish(self, name: &str, input_shape: [usize; 3], num_classes: usize) -> ArchSpec {
        ArchSpec {
            schema: ARCH_SCHEMA.to_string(),
            name: name.to_string(),
            input_shape,
            num_classes,
            layers: self.layers,
            blocks: self.blocks,
        }
    }
}

/// Eight conv-BN-ReLU layers with two average pools; every BN is gated.
pub fn vgg_small(input_shape: [usize; 3], num_classes: usize) -> ArchSpec {
    let mut b = Builder::default();
    let mut prev = None;
    let mut conv_idx = 0;
    for (i, &width) in VGG_SMALL.iter().enumerate() {
        if width == 0 {
            prev = Some(b.push(format!("pool{i}"), LayerKind::Pool { kernel: 2 }, b.after(prev)));
            continue;
        }
        conv_idx += 1;
        let ids = b.conv_bn(&format!("conv{conv_idx}"), prev, width, 3, 1, true);
        prev = ids.last().copied();
        b.block(BlockKind::Plain, ids, vec![]);
    }
    b.classifier(prev.expect("non-empty"));
    b.finish("vgg-small", input_shape, num_classes)
}

/// Stem plus three stages of two basic blocks; gates sit on the first BN of
/// each block's residual branch.
pub fn resnet_tiny(input_shape: [usize; 3], num_classes: usize) -> ArchSpec {
    let mut b = Builder::default();
    let stem = b.conv_bn("stem", None, RESNET_STAGES[0], 3, 1, true);
    let mut prev = *stem.last().unwrap();
    let mut in_width = RESNET_STAGES[0];
    for (s, &width) in RESNET_STAGES.iter().enumerate() {
        for k in 0..RESNET_BLOCKS_PER_STAGE {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", s + 1, k + 1);
            let mut main = b.conv_bn(&format!("{prefix}.a"), Some(prev), width, 3, stride, true);
            let second = b.conv_bn(&format!("{prefix}.b"), main.last().copied(), width, 3, 1, false);
            let branch_out = *second.last().unwrap();
            main.extend(second);
            let (shortcut, skip) = if stride != 1 || in_width != width {
                let sc = b.conv_bn(&format!("{prefix}.proj"), Some(prev), width, 1, stride, false);
                let out = *sc.last().unwrap();
                (sc, out)
            } else {
                (vec![], prev)
            };
            let add = b.push(format!("{prefix}.add"), LayerKind::Add, vec![branch_out, skip]);
            let relu = b.push(format!("{prefix}.relu"), LayerKind::Relu, vec![add]);
            main.extend([add, relu]);
            b.block(BlockKind::Residual, main, shortcut);
            prev = relu;
            in_width = width;
        }
    }
    b.classifier(prev);
    b.finish("resnet-tiny", input_shape, num_classes)
}

/// Stem plus depthwise-separable blocks; gates sit on the stem BN and on the
/// second (pointwise) BN of each block.
pub fn depthwise_tiny(input_shape: [usize; 3], num_classes: usize) -> ArchSpec {
    let mut b = Builder::default();
    let stem = b.conv_bn("stem", None, 8, 3, 1, true);
    let mut prev = *stem.last().unwrap();
    b.block(BlockKind::Plain, stem, vec![]);
    for (i, &(width, stride)) in DEPTHWISE_BLOCKS.iter().enumerate() {
        let prefix = format!("dwblock{}", i + 1);
        let mut ids = b.dw_bn_relu(&prefix, prev, stride);
        let pw = b.conv_bn(&format!("{prefix}.pw"), ids.last().copied(), width, 1, 1, true);
        ids.extend(pw);
        prev = *ids.last().unwrap();
        b.block(BlockKind::Depthwise, ids, vec![]);
    }
    b.classifier(prev);
    b.finish("depthwise-tiny", input_shape, num_classes)
}
