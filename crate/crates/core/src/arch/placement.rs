use serde::{Deserialize, Serialize};

use super::{ArchError, ArchSpec, BlockKind, LayerKind, Result};

/// Why a BatchNorm layer carries a gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRationale {
    PostBatchNorm,
    ResidualMiddle,
    DepthwiseSecondBatchNorm,
    InvertedFirstBatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSite {
    /// The gated BatchNorm layer.
    pub layer: usize,
    /// The dense convolution whose output channels the gate selects.
    pub conv: usize,
    pub rationale: GateRationale,
}

/// Gated layers of an architecture, ordered by layer id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatePlacement {
    pub sites: Vec<GateSite>,
}

impl GatePlacement {
    pub fn gated_layer_ids(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.layer).collect()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Full width of every gated layer, i.e. the producing conv's width.
    pub fn widths(&self, arch: &ArchSpec) -> Vec<usize> {
        self.sites
            .iter()
            .map(|s| match arch.layers[s.conv].kind {
                LayerKind::Conv { channels, .. } => channels,
                _ => unreachable!("gate sites always point at dense convolutions"),
            })
            .collect()
    }

    /// Position of `layer` among the gated layers.
    pub fn slot_of(&self, layer: usize) -> Option<usize> {
        self.sites.iter().position(|s| s.layer == layer)
    }
}

/// Chooses gate locations from block metadata. Layers outside every block
/// (e.g. a residual stem) are never gated.
pub fn place_gates(arch: &ArchSpec) -> Result<GatePlacement> {
    let mut sites = Vec::new();
    for (b, block) in arch.blocks.iter().enumerate() {
        let bns: Vec<usize> = block
            .layers
            .iter()
            .copied()
            .filter(|&id| arch.layers.get(id).map(|l| l.kind) == Some(LayerKind::BatchNorm))
            .collect();
        let chosen: Vec<(usize, GateRationale)> = match block.kind {
            BlockKind::Plain => bns.iter().map(|&id| (id, GateRationale::PostBatchNorm)).collect(),
            BlockKind::Residual => {
                if bns.len() < 2 {
                    return Err(ArchError::Spec(format!("residual block {b} needs at least two BatchNorm layers")));
                }
                bns[..bns.len() - 1].iter().map(|&id| (id, GateRationale::ResidualMiddle)).collect()
            }
            BlockKind::Depthwise => {
                let &id = bns
                    .get(1)
                    .ok_or_else(|| ArchError::Spec(format!("depthwise block {b} needs two BatchNorm layers")))?;
                vec![(id, GateRationale::DepthwiseSecondBatchNorm)]
            }
            BlockKind::InvertedResidual => {
                let &id = bns
                    .first()
                    .ok_or_else(|| ArchError::Spec(format!("inverted residual block {b} has no BatchNorm layer")))?;
                vec![(id, GateRationale::InvertedFirstBatchNorm)]
            }
        };
        for (layer, rationale) in chosen {
            let conv = *arch.layers[layer]
                .inputs
                .first()
                .ok_or_else(|| ArchError::Spec(format!("gated layer {layer} has no producer")))?;
            if !matches!(arch.layers[conv].kind, LayerKind::Conv { .. }) {
                return Err(ArchError::Spec(format!(
                    "gated layer {layer} must follow a dense convolution"
                )));
            }
            sites.push(GateSite { layer, conv, rationale });
        }
    }
    sites.sort_by_key(|s| s.layer);
    if sites.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(ArchError::Spec("a layer is gated by more than one block".into()));
    }
    Ok(GatePlacement { sites })
}
