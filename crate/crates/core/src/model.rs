//! Executable models generated from an architecture and a channel config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::arch::{
    place_gates, ArchError, ArchSpec, ChannelConfig, GatePlacement, LayerKind, ResolvedArch,
};
use crate::tensor::{ConvGeometry, Graph, Real, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T: Real> {
    None,
    Conv { weight: Tensor<T>, geom: ConvGeometry },
    BatchNorm { gamma: Tensor<T>, beta: Tensor<T>, running_mean: Vec<T>, running_var: Vec<T> },
    Linear { weight: Tensor<T>, bias: Tensor<T> },
}

/// Vars recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Trainable parameters, in [`Model::params_mut`] order.
    pub params: Vec<Var>,
    /// One var per gated layer when gates were supplied.
    pub gates: Vec<Var>,
    /// Output of every layer.
    pub outputs: Vec<Var>,
}

/// A network instance: an architecture, the channel config it was built
/// with, and concrete tensors for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    arch: ArchSpec,
    placement: GatePlacement,
    config: ChannelConfig,
    resolved: ResolvedArch,
    layers: Vec<LayerParams<T>>,
}

impl<T: Real> Model<T> {
    /// Builds the pruned model `config` describes with freshly drawn weights:
    /// He-normal convolutions, unit/zero BN affine, scaled-normal classifier.
    pub fn generate(arch: &ArchSpec, config: &ChannelConfig, seed: u64) -> Result<Self, ArchError> {
        arch.validate()?;
        let placement = place_gates(arch)?;
        if config.kept_counts.contains(&0) {
            return Err(ArchError::Generation("a gated layer would have zero channels".into()));
        }
        let resolved = ResolvedArch::with_config(arch, &placement, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, fan_in: usize, gain: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt()).expect("finite std");
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| T::lit(dist.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("consistent shape")
        };
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (id, layer) in arch.layers.iter().enumerate() {
            let cin = resolved.input_set(arch, id).len();
            let cout = resolved.channels(id);
            let params = match layer.kind {
                LayerKind::Conv { kernel, stride, padding, .. } => LayerParams::Conv {
                    weight: normal(vec![cout, cin, kernel, kernel], cin * kernel * kernel, 2.0),
                    geom: ConvGeometry::new(stride, padding, 1),
                },
                LayerKind::DepthwiseConv { kernel, stride, padding } => LayerParams::Conv {
                    weight: normal(vec![cout, 1, kernel, kernel], kernel * kernel, 2.0),
                    geom: ConvGeometry::new(stride, padding, cout),
                },
                LayerKind::BatchNorm => LayerParams::BatchNorm {
                    gamma: Tensor::full([cout], T::one()),
                    beta: Tensor::zeros([cout]),
                    running_mean: vec![T::zero(); cout],
                    running_var: vec![T::one(); cout],
                },
                LayerKind::Linear => LayerParams::Linear {
                    weight: normal(vec![cout, cin], cin, 1.0),
                    bias: Tensor::zeros([cout]),
                },
                _ => LayerParams::None,
            };
            layers.push(params);
        }
        Ok(Self { arch: arch.clone(), placement, config: config.clone(), resolved, layers })
    }

    /// The unpruned model.
    pub fn full(arch: &ArchSpec, seed: u64) -> Result<Self, ArchError> {
        let placement = place_gates(arch)?;
        Self::generate(arch, &ChannelConfig::full(arch, &placement), seed)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn placement(&self) -> &GatePlacement {
        &self.placement
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn resolved(&self) -> &ResolvedArch {
        &self.resolved
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    /// Current width of every gated layer.
    pub fn gate_widths(&self) -> Vec<usize> {
        self.config.kept_counts.clone()
    }

    pub fn flops(&self) -> u64 {
        crate::arch::count_flops(&self.arch, Some(&self.config)).expect("validated at construction")
    }

    /// Slices this full model down to `config`, keeping the original values
    /// of every surviving weight on both channel axes.
    pub fn lottery_slice(&self, config: &ChannelConfig) -> Result<Self, ArchError> {
        if !self.config.is_full(&self.arch, &self.placement) {
            return Err(ArchError::Config("lottery slicing needs the full-model initialization".into()));
        }
        let resolved = ResolvedArch::with_config(&self.arch, &self.placement, config)?;
        let slice_err = |e: TensorError| ArchError::Config(e.to_string());
        let pick = |v: &[T], idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| v[i]).collect() };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (id, (layer, params)) in self.arch.layers.iter().zip(&self.layers).enumerate() {
            let out_set = &resolved.channel_sets[id];
            let in_set = resolved.input_set(&self.arch, id);
            let sliced = match (layer.kind, params) {
                (LayerKind::Conv { .. }, LayerParams::Conv { weight, geom }) => LayerParams::Conv {
                    weight: weight.select_rows(out_set).and_then(|w| w.select_axis1(&in_set)).map_err(slice_err)?,
                    geom: *geom,
                },
                (LayerKind::DepthwiseConv { .. }, LayerParams::Conv { weight, geom }) => LayerParams::Conv {
                    weight: weight.select_rows(out_set).map_err(slice_err)?,
                    geom: ConvGeometry { groups: out_set.len(), ..*geom },
                },
                (_, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => LayerParams::BatchNorm {
                    gamma: gamma.select_rows(out_set).map_err(slice_err)?,
                    beta: beta.select_rows(out_set).map_err(slice_err)?,
                    running_mean: pick(running_mean, out_set),
                    running_var: pick(running_var, out_set),
                },
                (_, LayerParams::Linear { weight, bias }) => LayerParams::Linear {
                    weight: weight.select_axis1(&in_set).map_err(slice_err)?,
                    bias: bias.clone(),
                },
                (_, other) => other.clone(),
            };
            layers.push(sliced);
        }
        Ok(Self {
            arch: self.arch.clone(),
            placement: self.placement.clone(),
            config: config.clone(),
            resolved,
            layers,
        })
    }

    /// Records one forward pass. Parameters become gradient targets only when
    /// `param_grads` is set; supplied gates always do.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        input: Tensor<T>,
        gates: Option<&[Vec<T>]>,
        mode: Mode,
        param_grads: bool,
    ) -> Result<ForwardPass, TensorError> {
        let [c, h, w] = self.arch.input_shape;
        if input.shape().len() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(TensorError::Dimension {
                op: "model",
                detail: format!("input {:?} does not match [N, {c}, {h}, {w}]", input.shape()),
            });
        }
        if let Some(gv) = gates {
            let widths = self.gate_widths();
            if gv.len() != widths.len() || gv.iter().zip(&widths).any(|(v, &w)| v.len() != w) {
                return Err(TensorError::Dimension {
                    op: "model",
                    detail: format!("gate vectors do not match gated widths {widths:?}"),
                });
            }
        }
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| if param_grads { g.leaf(t.clone().with_grad()) } else { g.leaf(t.clone()) };
        let x = g.leaf(input);
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        let mut gate_vars = Vec::new();
        for id in 0..self.layers.len() {
            let spec = &self.arch.layers[id];
            let src = spec.inputs.first().map_or(x, |&s| outputs[s]);
            let out = match (&spec.kind, &mut self.layers[id]) {
                (LayerKind::Conv { .. } | LayerKind::DepthwiseConv { .. }, LayerParams::Conv { weight, geom }) => {
                    let wv = leaf(g, weight);
                    params.push(wv);
                    g.conv2d(src, wv, *geom)?
                }
                (LayerKind::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    let gv = leaf(g, gamma);
                    let bv = leaf(g, beta);
                    params.extend([gv, bv]);
                    let y = match mode {
                        Mode::Train => {
                            let (y, stats) = g.batch_norm_train(src, gv, bv, BN_EPS)?;
                            update_running(running_mean, running_var, &stats.mean, &stats.var, stats.count);
                            y
                        }
                        Mode::Eval => g.batch_norm_eval(src, gv, bv, running_mean, running_var, BN_EPS)?,
                    };
                    match (gates, self.placement.slot_of(id)) {
                        (Some(gv), Some(slot)) => {
                            let gate = g.leaf(Tensor::new([gv[slot].len()], gv[slot].clone())?.with_grad());
                            gate_vars.push(gate);
                            g.gate(y, gate)?
                        }
                        _ => y,
                    }
                }
                (LayerKind::Relu, _) => g.relu(src)?,
                (LayerKind::Pool { kernel }, _) => g.avg_pool(src, *kernel)?,
                (LayerKind::GlobalPool, _) => g.global_avg_pool(src)?,
                (LayerKind::Linear, LayerParams::Linear { weight, bias }) => {
                    let wv = leaf(g, weight);
                    let bv = leaf(g, bias);
                    params.extend([wv, bv]);
                    g.linear(src, wv, bv)?
                }
                (LayerKind::Add, _) => g.add(outputs[spec.inputs[0]], outputs[spec.inputs[1]])?,
                (kind, _) => {
                    return Err(TensorError::Contract(format!("layer {id} ({kind:?}) has mismatched parameters")))
                }
            };
            outputs.push(out);
        }
        Ok(ForwardPass { logits: *outputs.last().expect("non-empty"), params, gates: gate_vars, outputs })
    }

    /// Trainable tensors in the order [`ForwardPass::params`] lists them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Conv { weight, .. } => out.push(weight),
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// SHA-256 over every trainable tensor (shapes and values). Running
    /// statistics are not weights and are excluded.
    pub fn weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors(false) {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Named tensors, optionally including BN running statistics.
    pub fn named_tensors(&self, with_stats: bool) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, layer) in self.arch.layers.iter().zip(&self.layers) {
            let name = &spec.name;
            match layer {
                LayerParams::Conv { weight, .. } => out.push((format!("{name}.weight"), weight.clone())),
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.push((format!("{name}.gamma"), gamma.clone()));
                    out.push((format!("{name}.beta"), beta.clone()));
                    if with_stats {
                        let n = running_mean.len();
                        out.push((format!("{name}.running_mean"), Tensor::new([n], running_mean.clone()).expect("len")));
                        out.push((format!("{name}.running_var"), Tensor::new([n], running_var.clone()).expect("len")));
                    }
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("{name}.weight"), weight.clone()));
                    out.push((format!("{name}.bias"), bias.clone()));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Overwrites tensors from `(name, tensor)` pairs produced by
    /// [`Model::named_tensors`] with statistics. Names and shapes must match exactly.
    pub fn load_named_tensors(&mut self, entries: &[(String, Tensor<T>)]) -> Result<(), ArchError> {
        let expected = self.named_tensors(true);
        if expected.len() != entries.len() {
            return Err(ArchError::Config(format!(
                "state has {} tensors, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((want_name, want), (name, got)) in expected.iter().zip(entries) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ArchError::Config(format!(
                    "state entry {name} {:?} does not match {want_name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = entries.iter().map(|(_, t)| t);
        for layer in &mut self.layers {
            match layer {
                LayerParams::Conv { weight, .. } => *weight = it.next().expect("len checked").clone(),
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                    *gamma = it.next().expect("len checked").clone();
                    *beta = it.next().expect("len checked").clone();
                    *running_mean = it.next().expect("len checked").data().to_vec();
                    *running_var = it.next().expect("len checked").data().to_vec();
                }
                LayerParams::Linear { weight, bias } => {
                    *weight = it.next().expect("len checked").clone();
                    *bias = it.next().expect("len checked").clone();
                }
                LayerParams::None => {}
            }
        }
        Ok(())
    }

    /// Same model in another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { weight, geom } => LayerParams::Conv { weight: weight.cast(), geom: *geom },
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => LayerParams::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: conv(running_mean),
                    running_var: conv(running_var),
                },
                LayerParams::Linear { weight, bias } => LayerParams::Linear { weight: weight.cast(), bias: bias.cast() },
            })
            .collect();
        Model {
            arch: self.arch.clone(),
            placement: self.placement.clone(),
            config: self.config.clone(),
            resolved: self.resolved.clone(),
            layers,
        }
    }
}

fn update_running<T: Real>(mean: &mut [T], var: &mut [T], batch_mean: &[T], batch_var: &[T], count: usize) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + m * batch_mean[c];
        var[c] = keep * var[c] + m * batch_var[c] * unbias;
    }
}
