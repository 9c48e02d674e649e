use serde::{Deserialize, Serialize};

use super::{ArchError, ArchSpec, GatePlacement, LayerKind, Result};
use crate::gates::GateState;
use crate::tensor::ConvGeometry;

/// A pruned structure: which channels of each gated layer survive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kept_counts: Vec<usize>,
    /// Sorted indices into each gated layer's full channel range.
    pub kept_indices: Vec<Vec<usize>>,
}

impl ChannelConfig {
    pub fn from_indices(kept_indices: Vec<Vec<usize>>) -> Self {
        Self { kept_counts: kept_indices.iter().map(Vec::len).collect(), kept_indices }
    }

    /// Keeps every channel.
    pub fn full(arch: &ArchSpec, placement: &GatePlacement) -> Self {
        Self::from_indices(placement.widths(arch).into_iter().map(|w| (0..w).collect()).collect())
    }

    /// Keeps the first `counts[j]` channels of each gated layer.
    pub fn leading(counts: &[usize]) -> Self {
        Self::from_indices(counts.iter().map(|&k| (0..k).collect()).collect())
    }

    pub fn validate(&self, arch: &ArchSpec, placement: &GatePlacement) -> Result<()> {
        let widths = placement.widths(arch);
        if self.kept_indices.len() != widths.len() || self.kept_counts.len() != widths.len() {
            return Err(ArchError::Config(format!(
                "config covers {} layers, architecture has {} gated layers",
                self.kept_indices.len(),
                widths.len()
            )));
        }
        for (j, (idx, &width)) in self.kept_indices.iter().zip(&widths).enumerate() {
            if self.kept_counts[j] != idx.len() {
                return Err(ArchError::Config(format!("gated layer {j}: count disagrees with index set")));
            }
            if idx.is_empty() || idx.len() > width {
                return Err(ArchError::Config(format!(
                    "gated layer {j}: keeps {} of {width} channels",
                    idx.len()
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&l| l >= width) {
                return Err(ArchError::Config(format!(
                    "gated layer {j}: indices must be sorted, unique and below {width}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_full(&self, arch: &ArchSpec, placement: &GatePlacement) -> bool {
        self.kept_counts == placement.widths(arch)
    }
}

/// Per-layer channel sets and spatial sizes of an architecture under a
/// channel config. Channel sets index into the full width of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedArch {
    pub channel_sets: Vec<Vec<usize>>,
    pub full_widths: Vec<usize>,
    /// Output (height, width) of each layer.
    pub spatial: Vec<(usize, usize)>,
    input_channels: usize,
    input_hw: (usize, usize),
}

impl ResolvedArch {
    pub fn full(arch: &ArchSpec) -> Result<Self> {
        Self::resolve(arch, &[])
    }

    pub fn with_config(arch: &ArchSpec, placement: &GatePlacement, config: &ChannelConfig) -> Result<Self> {
        config.validate(arch, placement)?;
        let overrides: Vec<(usize, &[usize])> = placement
            .sites
            .iter()
            .zip(&config.kept_indices)
            .map(|(site, idx)| (site.conv, idx.as_slice()))
            .collect();
        Self::resolve(arch, &overrides)
    }

    /// Channel set read by `layer` (its first input, or the network input).
    pub fn input_set(&self, arch: &ArchSpec, layer: usize) -> Vec<usize> {
        match arch.layers[layer].inputs.first() {
            Some(&src) => self.channel_sets[src].clone(),
            None => (0..self.input_channels).collect(),
        }
    }

    pub fn input_width(&self, arch: &ArchSpec, layer: usize) -> usize {
        match arch.layers[layer].inputs.first() {
            Some(&src) => self.full_widths[src],
            None => self.input_channels,
        }
    }

    pub fn input_hw(&self, arch: &ArchSpec, layer: usize) -> (usize, usize) {
        match arch.layers[layer].inputs.first() {
            Some(&src) => self.spatial[src],
            None => self.input_hw,
        }
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.channel_sets[layer].len()
    }

    fn resolve(arch: &ArchSpec, overrides: &[(usize, &[usize])]) -> Result<Self> {
        let n = arch.layers.len();
        let [c0, h0, w0] = arch.input_shape;
        let mut out = Self {
            channel_sets: Vec::with_capacity(n),
            full_widths: Vec::with_capacity(n),
            spatial: Vec::with_capacity(n),
            input_channels: c0,
            input_hw: (h0, w0),
        };
        let spec = |id: usize, msg: String| ArchError::Spec(format!("layer {id} ({}): {msg}", arch.layers[id].name));
        for (id, layer) in arch.layers.iter().enumerate() {
            let in_set = out.input_set(arch, id);
            let in_width = out.input_width(arch, id);
            let (h, w) = out.input_hw(arch, id);
            let (set, width, hw) = match layer.kind {
                LayerKind::Conv { channels, kernel, stride, padding } => {
                    let hw = ConvGeometry::new(stride, padding, 1)
                        .output_hw(h, w, kernel, kernel)
                        .map_err(|e| spec(id, e.to_string()))?;
                    let set = match overrides.iter().find(|(conv, _)| *conv == id) {
                        Some((_, idx)) => idx.to_vec(),
                        None => (0..channels).collect(),
                    };
                    (set, channels, hw)
                }
                LayerKind::DepthwiseConv { kernel, stride, padding } => {
                    let hw = ConvGeometry::new(stride, padding, 1)
                        .output_hw(h, w, kernel, kernel)
                        .map_err(|e| spec(id, e.to_string()))?;
                    (in_set, in_width, hw)
                }
                LayerKind::BatchNorm | LayerKind::Relu => (in_set, in_width, (h, w)),
                LayerKind::Pool { kernel } => {
                    if kernel == 0 || h / kernel == 0 || w / kernel == 0 {
                        return Err(spec(id, format!("pool {kernel} on {h}x{w}")));
                    }
                    (in_set, in_width, (h / kernel, w / kernel))
                }
                LayerKind::GlobalPool => (in_set, in_width, (1, 1)),
                LayerKind::Linear => {
                    let src = layer.inputs.first().copied();
                    if src.map(|s| arch.layers[s].kind) != Some(LayerKind::GlobalPool) {
                        return Err(spec(id, "classifier must read a global pool".into()));
                    }
                    ((0..arch.num_classes).collect(), arch.num_classes, (1, 1))
                }
                LayerKind::Add => {
                    let (a, b) = (layer.inputs[0], layer.inputs[1]);
                    if out.full_widths[a] != out.full_widths[b] || out.spatial[a] != out.spatial[b] {
                        return Err(spec(id, "join operands differ in width or spatial size".into()));
                    }
                    if out.channel_sets[a] != out.channel_sets[b] {
                        return Err(ArchError::Config(format!(
                            "join {id} ({}) receives different channel sets",
                            layer.name
                        )));
                    }
                    (in_set, in_width, (h, w))
                }
            };
            out.channel_sets.push(set);
            out.full_widths.push(width);
            out.spatial.push(hw);
        }
        Ok(out)
    }
}

/// Keeps channel `c` of gated layer `j` iff `λ_j[c] > τ`. A layer left with
/// no survivors keeps its single highest-gate channel.
pub fn prune_by_threshold(gates: &GateState, tau: f64) -> Result<ChannelConfig> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ArchError::Config(format!("threshold {tau} outside [0, 1]")));
    }
    let kept = gates
        .lambda
        .iter()
        .map(|layer| {
            let mut idx: Vec<usize> = layer
                .iter()
                .enumerate()
                .filter(|(_, &g)| f64::from(g) > tau)
                .map(|(c, _)| c)
                .collect();
            if idx.is_empty() && !layer.is_empty() {
                let best = layer
                    .iter()
                    .enumerate()
                    .fold(0, |best, (c, &g)| if g > layer[best] { c } else { best });
                idx.push(best);
            }
            idx
        })
        .collect();
    Ok(ChannelConfig::from_indices(kept))
}
