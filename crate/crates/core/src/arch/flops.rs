use super::{place_gates, ArchSpec, ChannelConfig, LayerKind, ResolvedArch, Result};

/// Multiply-accumulate count of all convolution and linear layers under
/// `config` (`None` means the full architecture). BN, ReLU, pooling and
/// joins are free.
pub fn count_flops(arch: &ArchSpec, config: Option<&ChannelConfig>) -> Result<u64> {
    let resolved = match config {
        Some(cfg) => ResolvedArch::with_config(arch, &place_gates(arch)?, cfg)?,
        None => ResolvedArch::full(arch)?,
    };
    Ok(flops_of_resolved(arch, &resolved))
}

pub(crate) fn flops_of_resolved(arch: &ArchSpec, r: &ResolvedArch) -> u64 {
    arch.layers
        .iter()
        .enumerate()
        .map(|(id, layer)| {
            let cin = r.input_set(arch, id).len() as u64;
            let cout = r.channels(id) as u64;
            let (ho, wo) = r.spatial[id];
            let positions = (ho * wo) as u64;
            match layer.kind {
                LayerKind::Conv { kernel, .. } => cin * cout * (kernel * kernel) as u64 * positions,
                // groups == channels, so each output channel sees one input channel
                LayerKind::DepthwiseConv { kernel, .. } => cout * (kernel * kernel) as u64 * positions,
                LayerKind::Linear => cin * cout,
                _ => 0,
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::super::presets::Builder;
    use super::super::{BlockKind, GatePlacement};
    use super::*;

    fn single_conv(cin: usize, cout: usize, hw: usize, kernel: usize) -> ArchSpec {
        let mut b = Builder::default();
        let ids = b.conv_bn("c", None, cout, kernel, 1, true);
        let out = *ids.last().unwrap();
        b.block(BlockKind::Plain, ids, vec![]);
        b.classifier(out);
        b.finish("single", [cin, hw, hw], 1)
    }

    #[test]
    fn unit_conv_is_one_mac() {
        let arch = single_conv(1, 1, 1, 1);
        // conv 1 MAC plus the 1x1 classifier
        assert_eq!(count_flops(&arch, None).unwrap(), 1 + 1);
    }

    #[test]
    fn three_by_three_conv_on_cifar_geometry() {
        let arch = single_conv(3, 16, 32, 3);
        let classifier = 16;
        // brute-force tally over every output position and kernel tap
        let mut taps = 0u64;
        for _co in 0..16 {
            for _oy in 0..32 {
                for _ox in 0..32 {
                    for _ci in 0..3 {
                        for _k in 0..9 {
                            taps += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(taps, 442_368);
        assert_eq!(count_flops(&arch, None).unwrap(), taps + classifier);
    }

    #[test]
    fn halving_a_plain_chain() {
        let mut b = Builder::default();
        let first = b.conv_bn("a", None, 8, 3, 1, true);
        let mid = *first.last().unwrap();
        b.block(BlockKind::Plain, first, vec![]);
        let second = b.conv_bn("b", Some(mid), 8, 3, 1, true);
        let out = *second.last().unwrap();
        b.block(BlockKind::Plain, second, vec![]);
        b.classifier(out);
        let arch = b.finish("chain", [3, 4, 4], 5);
        let p: GatePlacement = place_gates(&arch).unwrap();
        let half = ChannelConfig::leading(&[4, 4]);
        let full_r = ResolvedArch::full(&arch).unwrap();
        let half_r = ResolvedArch::with_config(&arch, &p, &half).unwrap();
        let per_layer = |r: &ResolvedArch, id: usize| {
            let cin = r.input_set(&arch, id).len() as u64;
            cin * r.channels(id) as u64 * 9 * 16
        };
        let conv_a = 0;
        let conv_b = 3;
        assert_eq!(per_layer(&half_r, conv_a) * 2, per_layer(&full_r, conv_a));
        assert_eq!(per_layer(&half_r, conv_b) * 4, per_layer(&full_r, conv_b));
        let full = count_flops(&arch, None).unwrap();
        let pruned = count_flops(&arch, Some(&half)).unwrap();
        assert_eq!(full, 3 * 8 * 144 + 8 * 8 * 144 + 8 * 5);
        assert_eq!(pruned, 3 * 4 * 144 + 4 * 4 * 144 + 4 * 5);
    }
}
