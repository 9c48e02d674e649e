//! Shared oracles for integration tests: finite differences and naive loops.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// |a − b| relative to the larger magnitude, with a floor for values at zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Direct six-loop cross-correlation over `[N, Cin, H, W]` with groups.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                s += x[((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((co * cin_g + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    let _ = cin;
    (out, [n, cout, ho, wo])
}

use scratchprune::arch::{
    place_gates, ArchSpec, BlockKind, BlockSpec, ChannelConfig, LayerKind, LayerSpec, ARCH_SCHEMA,
};

fn layer(name: &str, kind: LayerKind, inputs: Vec<usize>) -> LayerSpec {
    LayerSpec { name: name.into(), kind, inputs }
}

/// conv → BN → ReLU → conv → BN → ReLU → global pool → linear, both BNs gated.
pub fn two_conv_arch(cin: usize, width: usize, hw: usize, classes: usize) -> ArchSpec {
    let conv = |channels| LayerKind::Conv { channels, kernel: 3, stride: 1, padding: 1 };
    ArchSpec {
        schema: ARCH_SCHEMA.into(),
        name: "two-conv".into(),
        input_shape: [cin, hw, hw],
        num_classes: classes,
        layers: vec![
            layer("c1", conv(width), vec![]),
            layer("bn1", LayerKind::BatchNorm, vec![0]),
            layer("relu1", LayerKind::Relu, vec![1]),
            layer("c2", conv(width), vec![2]),
            layer("bn2", LayerKind::BatchNorm, vec![3]),
            layer("relu2", LayerKind::Relu, vec![4]),
            layer("pool", LayerKind::GlobalPool, vec![5]),
            layer("fc", LayerKind::Linear, vec![6]),
        ],
        blocks: vec![
            BlockSpec { kind: BlockKind::Plain, layers: vec![0, 1, 2], shortcut: vec![] },
            BlockSpec { kind: BlockKind::Plain, layers: vec![3, 4, 5], shortcut: vec![] },
        ],
    }
}

/// Random non-empty sorted subset of every gated layer.
pub fn random_config(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> ChannelConfig {
    let widths = place_gates(arch).unwrap().widths(arch);
    let kept = widths
        .iter()
        .map(|&w| {
            let k = rng.random_range(1..=w);
            let mut idx = rand::seq::index::sample(rng, w, k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    ChannelConfig::from_indices(kept)
}

/// Counts multiply-accumulates by walking every output element and every
/// kernel tap. Channel counts are propagated layer by layer from the config.
pub fn brute_force_flops(arch: &ArchSpec, config: &ChannelConfig) -> u64 {
    let placement = place_gates(arch).unwrap();
    let [c0, h0, w0] = arch.input_shape;
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
    let mut macs = 0u64;
    for (id, l) in arch.layers.iter().enumerate() {
        let (cin, h, w) = match l.inputs.first() {
            Some(&src) => shapes[src],
            None => (c0, h0, w0),
        };
        let out = match l.kind {
            LayerKind::Conv { channels, kernel, stride, padding } => {
                let cout = placement
                    .sites
                    .iter()
                    .position(|s| s.conv == id)
                    .map_or(channels, |j| config.kept_counts[j]);
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                for _ in 0..cout * ho * wo {
                    for _ in 0..cin * kernel * kernel {
                        macs += 1;
                    }
                }
                (cout, ho, wo)
            }
            LayerKind::DepthwiseConv { kernel, stride, padding } => {
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                for _ in 0..cin * ho * wo {
                    for _ in 0..kernel * kernel {
                        macs += 1;
                    }
                }
                (cin, ho, wo)
            }
            LayerKind::Pool { kernel } => (cin, h / kernel, w / kernel),
            LayerKind::GlobalPool => (cin, 1, 1),
            LayerKind::Linear => {
                for _ in 0..cin * arch.num_classes {
                    macs += 1;
                }
                (arch.num_classes, 1, 1)
            }
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Add => (cin, h, w),
        };
        shapes.push(out);
    }
    macs
}

/// Textbook two-pass Pearson correlation.
pub fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Overwrites every BatchNorm tensor, running statistics included, with
/// random values so that BN layers no longer act as the identity.
pub fn scramble_state(model: &mut scratchprune::model::Model<f32>, rng: &mut ChaCha8Rng) {
    let entries: Vec<_> = model
        .named_tensors(true)
        .into_iter()
        .map(|(name, mut t)| {
            let bn = ["gamma", "beta", "running_mean", "running_var"].iter().any(|s| name.ends_with(s));
            if !bn {
                return (name, t);
            }
            let positive = name.ends_with("running_var") || name.ends_with("gamma");
            for v in t.data_mut() {
                *v = if positive { rng.random_range(0.5..1.5) } else { rng.random_range(-0.5..0.5) };
            }
            (name, t)
        })
        .collect();
    model.load_named_tensors(&entries).unwrap();
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> scratchprune::tensor::Tensor<f32> {
    let numel = n * shape.iter().product::<usize>();
    let data = (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    scratchprune::tensor::Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap()
}

/// Logits of `model` in eval mode, optionally gated.
pub fn eval_logits(
    model: &mut scratchprune::model::Model<f32>,
    images: scratchprune::tensor::Tensor<f32>,
    gates: Option<&[Vec<f32>]>,
) -> Vec<f32> {
    let mut g = scratchprune::tensor::Graph::new();
    let fp = model.forward(&mut g, images, gates, scratchprune::model::Mode::Eval, false).unwrap();
    g.value(fp.logits).data().to_vec()
}

/// 0/1 gates that keep exactly the channels of `config`.
pub fn mask_gates(widths: &[usize], config: &ChannelConfig) -> Vec<Vec<f32>> {
    widths
        .iter()
        .zip(&config.kept_indices)
        .map(|(&w, idx)| (0..w).map(|c| if idx.contains(&c) { 1.0 } else { 0.0 }).collect())
        .collect()
}
