//! Layer-graph description of a convolutional network.
//!
//! An [`ArchSpec`] lists layers in evaluation order; each layer names the
//! earlier layers it consumes, so the vector order is a topological order of
//! the graph. Only dense convolutions carry their own width; every other
//! layer inherits its channel set from its input.

mod channels;
mod flops;
mod placement;
pub mod presets;

pub use channels::{prune_by_threshold, ChannelConfig, ResolvedArch};
pub use flops::count_flops;
pub use placement::{place_gates, GatePlacement, GateRationale, GateSite};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema tag written into every serialized architecture.
pub const ARCH_SCHEMA: &str = "scratchprune.arch/v1";

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("inconsistent channel config: {0}")]
    Config(String),
    #[error("model generation failed: {0}")]
    Generation(String),
    #[error("architecture file: {0}")]
    Io(#[from] std::io::Error),
    #[error("architecture file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ArchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
    DepthwiseConv { kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    /// Non-overlapping average pooling.
    Pool { kernel: usize },
    GlobalPool,
    /// Classifier; output width is the architecture's `num_classes`.
    Linear,
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producer layer ids; empty only for the first layer, which reads the network input.
    #[serde(default)]
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
    Depthwise,
    InvertedResidual,
}

/// Grouping metadata used by gate placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Main-path layer ids in order.
    pub layers: Vec<usize>,
    /// Projection shortcut layer ids, if any. Never gated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortcut: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub schema: String,
    pub name: String,
    /// (channels, height, width) of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<BlockSpec>,
}

impl ArchSpec {
    /// Checks graph structure, shapes and gate placement.
    pub fn validate(&self) -> Result<()> {
        if self.schema != ARCH_SCHEMA {
            return Err(ArchError::Spec(format!("unsupported schema tag {:?}", self.schema)));
        }
        if self.layers.is_empty() {
            return Err(ArchError::Spec("no layers".into()));
        }
        if self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(ArchError::Spec("empty input shape or zero classes".into()));
        }
        let mut consumed = vec![false; self.layers.len()];
        for (id, layer) in self.layers.iter().enumerate() {
            let arity = match layer.kind {
                LayerKind::Add => 2,
                _ => 1,
            };
            if id == 0 {
                if !layer.inputs.is_empty() {
                    return Err(ArchError::Spec("first layer must read the network input".into()));
                }
                if arity != 1 {
                    return Err(ArchError::Spec("first layer cannot be a join".into()));
                }
                continue;
            }
            if layer.inputs.len() != arity {
                return Err(ArchError::Spec(format!(
                    "layer {id} ({}) takes {arity} inputs, has {}",
                    layer.name,
                    layer.inputs.len()
                )));
            }
            for &src in &layer.inputs {
                if src >= id {
                    return Err(ArchError::Spec(format!("layer {id} reads layer {src}, which is not earlier")));
                }
                consumed[src] = true;
            }
            match layer.kind {
                LayerKind::Conv { channels, kernel, stride, .. } if channels == 0 || kernel == 0 || stride == 0 => {
                    return Err(ArchError::Spec(format!("layer {id} has a zero width, kernel or stride")))
                }
                LayerKind::DepthwiseConv { kernel, stride, .. } if kernel == 0 || stride == 0 => {
                    return Err(ArchError::Spec(format!("layer {id} has a zero kernel or stride")))
                }
                _ => {}
            }
        }
        let last = self.layers.len() - 1;
        if let Some(dangling) = consumed[..last].iter().position(|c| !c) {
            return Err(ArchError::Spec(format!("layer {dangling} is not consumed; graph must have one output")));
        }
        if self.layers[last].kind != LayerKind::Linear {
            return Err(ArchError::Spec("output layer must be the linear classifier".into()));
        }
        for block in &self.blocks {
            for &id in block.layers.iter().chain(&block.shortcut) {
                if id >= self.layers.len() {
                    return Err(ArchError::Spec(format!("block references missing layer {id}")));
                }
            }
        }
        ResolvedArch::full(self)?;
        let placement = place_gates(self)?;
        if placement.is_empty() {
            return Err(ArchError::Spec("architecture has no gated layers".into()));
        }
        Ok(())
    }

    /// Uniformly scales every convolution width by `multiplier`
    /// (round half up, minimum 1). The classifier width is unchanged.
    pub fn expand_channels(&self, multiplier: f64) -> Result<Self> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(ArchError::Spec(format!("expansion multiplier {multiplier} must be positive")));
        }
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let LayerKind::Conv { channels, .. } = &mut layer.kind {
                *channels = scale_width(*channels, multiplier);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|e| ArchError::Spec(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Width of every dense convolution, in layer order.
    pub fn conv_widths(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(id, l)| match l.kind {
                LayerKind::Conv { channels, .. } => Some((id, channels)),
                _ => None,
            })
            .collect()
    }
}

/// `round(width · multiplier)` with halves rounded up, floored at 1.
pub fn scale_width(width: usize, multiplier: f64) -> usize {
    ((width as f64 * multiplier + 0.5).floor() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_examples() {
        assert_eq!(scale_width(64, 1.25), 80);
        assert_eq!(scale_width(64, 0.75), 48);
        assert_eq!(scale_width(1, 0.1), 1);
        assert_eq!(scale_width(5, 0.5), 3);
        let arch = presets::vgg_small([3, 8, 8], 3);
        assert_eq!(arch.expand_channels(1.0).unwrap(), arch);
        assert!(arch.expand_channels(0.0).is_err());
    }

    #[test]
    fn expansion_keeps_classifier_and_residual_widths_consistent() {
        let arch = presets::resnet_tiny([3, 8, 8], 4).expand_channels(1.25).unwrap();
        arch.validate().unwrap();
        assert_eq!(arch.num_classes, 4);
    }

    #[test]
    fn json_roundtrip_and_schema_check() {
        let arch = presets::depthwise_tiny([3, 8, 8], 3);
        let text = arch.to_json().unwrap();
        assert_eq!(ArchSpec::from_json(&text).unwrap(), arch);
        let bad = text.replace(ARCH_SCHEMA, "other/v9");
        assert!(matches!(ArchSpec::from_json(&bad), Err(ArchError::Spec(_))));
        let unknown = text.replacen("\"depthwise\"", "\"octagonal\"", 1);
        assert!(matches!(ArchSpec::from_json(&unknown), Err(ArchError::Spec(_))));
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let mut arch = presets::vgg_small([3, 8, 8], 3);
        arch.layers[3].inputs = vec![5];
        assert!(arch.validate().is_err());

        let mut arch = presets::vgg_small([3, 8, 8], 3);
        arch.layers.pop();
        assert!(arch.validate().is_err());

        // join of unequal widths: widen the conv feeding the first residual add
        let mut arch = presets::resnet_tiny([3, 8, 8], 3);
        let add = arch.layers.iter().position(|l| l.kind == LayerKind::Add).unwrap();
        let bn = arch.layers[add].inputs[0];
        let conv = arch.layers[bn].inputs[0];
        if let LayerKind::Conv { channels, .. } = &mut arch.layers[conv].kind {
            *channels += 3;
        }
        assert!(arch.validate().is_err());
    }
}
