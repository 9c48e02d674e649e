//! Operation tape and reverse-mode backward pass.

use super::kernels::{self, ConvDims};
use super::{ConvGeometry, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, dims: ConvDims },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Gate { input: Var, gates: Var },
    Relu { input: Var },
    AvgPool { input: Var, kernel: usize },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Add { a: Var, b: Var },
    Sum { input: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: T, log_probs: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::BatchNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Op::Gate { input, gates } => vec![input, gates],
            Op::Relu { input }
            | Op::AvgPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Sum { input } => vec![input],
            Op::Linear { input, weight, bias } => vec![input, weight, bias],
            Op::Add { a, b } => vec![a, b],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A tape of recorded operations. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err(op, format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf tensor. Leaves created without `requires_grad` are
    /// constants: they may not be differentiation targets.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.value(input).shape(), self.value(weight).shape(), geom)?;
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &dims);
        let value = Tensor::new(dims.out_shape(), out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, dims })
    }

    fn check_affine(&self, op: &'static str, c: usize, params: &[Var]) -> Result<()> {
        for &p in params {
            let len = self.value(p).numel();
            if len != c {
                return Err(dim_err(op, format!("parameter of length {len} for {c} channels")));
            }
        }
        Ok(())
    }

    /// Normalizes with the statistics of the current batch.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("batch norm eps must be positive".into()));
        }
        let (n, c, h, w) = rank4("batch_norm", self.value(input).shape())?;
        self.check_affine("batch_norm", c, &[gamma, beta])?;
        let inner = h * w;
        if n * inner == 0 {
            return Err(TensorError::Statistics { op: "batch_norm", detail: "empty batch in train mode".into() });
        }
        let x = self.value(input).data();
        let (mean, var) = kernels::channel_stats(x, n, c, inner);
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (y, xhat) = kernels::normalize_affine(
            x,
            n,
            c,
            inner,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let shape = self.value(input).shape().to_vec();
        let out = self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: true },
        )?;
        Ok((out, BatchStats { mean, var, count: n * inner }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("batch norm eps must be positive".into()));
        }
        let (n, c, h, w) = rank4("batch_norm", self.value(input).shape())?;
        self.check_affine("batch_norm", c, &[gamma, beta])?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err("batch_norm", format!("running statistics do not cover {c} channels")));
        }
        let eps_t = T::lit(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (y, xhat) = kernels::normalize_affine(
            self.value(input).data(),
            n,
            c,
            h * w,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let shape = self.value(input).shape().to_vec();
        self.push(
            "batch_norm",
            Tensor::new(shape, y)?,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: false },
        )
    }

    /// Channel-wise modulation `y[n,c,h,w] = x[n,c,h,w] · gates[c]`.
    pub fn gate(&mut self, input: Var, gates: Var) -> Result<Var> {
        let (_, c, h, w) = rank4("gate", self.value(input).shape())?;
        let g = self.value(gates).data();
        if g.len() != c {
            return Err(dim_err("gate", format!("{} gates for {c} channels", g.len())));
        }
        let inner = h * w;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[(i / inner) % c])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("gate", value, Op::Gate { input, gates })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { input })
    }

    /// Non-overlapping `kernel × kernel` average pooling.
    pub fn avg_pool(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let (n, c, h, w) = rank4("avg_pool", self.value(input).shape())?;
        if kernel == 0 || h / kernel == 0 || w / kernel == 0 {
            return Err(TensorError::Geometry {
                op: "avg_pool",
                detail: format!("kernel {kernel} on {h}x{w} input"),
            });
        }
        let (ho, wo) = (h / kernel, w / kernel);
        let scale = T::one() / T::lit((kernel * kernel) as f64);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s = s + x[p * h * w + (oy * kernel + ky) * w + ox * kernel + kx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = s * scale;
                }
            }
        }
        self.push("avg_pool", Tensor::new([n, c, ho, wo], out)?, Op::AvgPool { input, kernel })
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = rank4("global_avg_pool", self.value(input).shape())?;
        let inner = h * w;
        if inner == 0 {
            return Err(TensorError::Geometry { op: "global_avg_pool", detail: "empty spatial extent".into() });
        }
        let scale = T::one() / T::lit(inner as f64);
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|p| x[p * inner..(p + 1) * inner].iter().copied().sum::<T>() * scale)
            .collect();
        self.push("global_avg_pool", Tensor::new([n, c], out)?, Op::GlobalAvgPool { input })
    }

    /// `y = x · Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let (n, fin) = match *xs {
            [n, f] => (n, f),
            _ => return Err(dim_err("linear", format!("expected [N, in], got {xs:?}"))),
        };
        let fout = match *ws {
            [o, i] if i == fin => o,
            _ => return Err(dim_err("linear", format!("weight {ws:?} incompatible with {fin} inputs"))),
        };
        if self.value(bias).numel() != fout {
            return Err(dim_err("linear", format!("bias length {} for {fout} outputs", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n * fout).map(|i| b[i % fout]).collect();
        T::gemm(
            n,
            fin,
            fout,
            self.value(input).data(),
            fin as isize,
            1,
            self.value(weight).data(),
            1,
            fin as isize,
            T::one(),
            &mut out,
            fout as isize,
            1,
        );
        self.push("linear", Tensor::new([n, fout], out)?, Op::Linear { input, weight, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input })
    }

    /// Mean cross-entropy of `[N, classes]` logits against targets that put
    /// `1 − smoothing` on the label and `smoothing / classes` on every class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => return Err(dim_err("cross_entropy", format!("expected [N, classes], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(dim_err("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if n == 0 {
            return Err(TensorError::Statistics { op: "cross_entropy", detail: "empty batch".into() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Label { label: bad, classes: k });
        }
        let smoothing_t = T::lit(smoothing);
        let log_probs = kernels::log_softmax(self.value(logits).data(), n, k);
        let on = T::one() - smoothing_t;
        let off = smoothing_t / T::lit(k as f64);
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &log_probs[i * k..(i + 1) * k];
            let mut li = -on * row[label];
            if smoothing > 0.0 {
                li = li - off * row.iter().copied().sum::<T>();
            }
            total = total + li;
        }
        let loss = total / T::lit(n as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), smoothing: smoothing_t, log_probs },
        )
    }

    /// Reverse-mode pass from the scalar `loss`. Returns `∂loss/∂t` for each
    /// target, in order; only nodes on a path to some target receive
    /// gradient storage.
    pub fn backward(&self, loss: Var, targets: &[Var]) -> Result<Vec<Tensor<T>>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for &t in targets {
            if t.0 >= self.nodes.len() {
                return Err(TensorError::Contract(format!("unknown target {t:?}")));
            }
            let node = &self.nodes[t.0];
            if matches!(node.op, Op::Leaf) && !node.value.requires_grad() {
                return Err(TensorError::Contract(format!("target {t:?} is a frozen leaf")));
            }
        }

        let mut needs = vec![false; self.nodes.len()];
        for &t in targets {
            needs[t.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !needs[i] && node.op.inputs().iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if needs[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(dy) = upper[0].as_deref() else { continue };
            self.backprop_node(i, dy, lower, &needs);
        }

        Ok(targets
            .iter()
            .map(|&t| {
                let shape = self.value(t).shape().to_vec();
                match &grads[t.0] {
                    Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>], needs: &[bool]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, contribution: Vec<T>| {
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, dims } => {
                if needs[input.0] {
                    acc(*input, kernels::conv2d_backward_input(dy, val(*weight), dims));
                }
                if needs[weight.0] {
                    acc(*weight, kernels::conv2d_backward_weight(dy, val(*input), dims));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = rank4("batch_norm", shape(*input)).expect("checked in forward");
                let inner = h * w;
                let (dgamma, dbeta) = kernels::channel_grad_sums(dy, xhat, n, c, inner);
                if needs[input.0] {
                    let g = val(*gamma);
                    let m = T::lit((n * inner) as f64);
                    let mut dx = vec![T::zero(); dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            let start = (b * c + ch) * inner;
                            for j in start..start + inner {
                                dx[j] = if *train {
                                    scale * (dy[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / m)
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                if needs[gamma.0] {
                    acc(*gamma, dgamma);
                }
                if needs[beta.0] {
                    acc(*beta, dbeta);
                }
            }
            Op::Gate { input, gates } => {
                let (_, c, h, w) = rank4("gate", shape(*input)).expect("checked in forward");
                let inner = h * w;
                if needs[input.0] {
                    let g = val(*gates);
                    acc(*input, dy.iter().enumerate().map(|(j, &d)| d * g[(j / inner) % c]).collect());
                }
                if needs[gates.0] {
                    let x = val(*input);
                    let mut dg = vec![T::zero(); c];
                    for (j, (&d, &xv)) in dy.iter().zip(x).enumerate() {
                        let ch = (j / inner) % c;
                        dg[ch] = dg[ch] + d * xv;
                    }
                    acc(*gates, dg);
                }
            }
            Op::Relu { input } => {
                if needs[input.0] {
                    let x = val(*input);
                    acc(*input, dy.iter().zip(x).map(|(&d, &xv)| if xv > T::zero() { d } else { T::zero() }).collect());
                }
            }
            Op::AvgPool { input, kernel } => {
                if needs[input.0] {
                    let (n, c, h, w) = rank4("avg_pool", shape(*input)).expect("checked in forward");
                    let k = *kernel;
                    let (ho, wo) = (h / k, w / k);
                    let scale = T::one() / T::lit((k * k) as f64);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = dy[(p * ho + oy) * wo + ox] * scale;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        dx[p * h * w + (oy * k + ky) * w + ox * k + kx] = d;
                                    }
                                }
                            }
                        }
                    }
                    acc(*input, dx);
                }
            }
            Op::GlobalAvgPool { input } => {
                if needs[input.0] {
                    let (n, c, h, w) = rank4("global_avg_pool", shape(*input)).expect("checked in forward");
                    let inner = h * w;
                    let scale = T::one() / T::lit(inner as f64);
                    let mut dx = vec![T::zero(); n * c * inner];
                    for p in 0..n * c {
                        let d = dy[p] * scale;
                        dx[p * inner..(p + 1) * inner].iter_mut().for_each(|v| *v = d);
                    }
                    acc(*input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, fin) = (shape(*input)[0], shape(*input)[1]);
                let fout = shape(*weight)[0];
                if needs[input.0] {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, dy, fout as isize, 1, val(*weight), fin as isize, 1, T::zero(), &mut dx, fin as isize, 1);
                    acc(*input, dx);
                }
                if needs[weight.0] {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, dy, 1, fout as isize, val(*input), fin as isize, 1, T::zero(), &mut dw, fin as isize, 1);
                    acc(*weight, dw);
                }
                if needs[bias.0] {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(*bias, db);
                }
            }
            Op::Add { a, b } => {
                if needs[a.0] {
                    acc(*a, dy.to_vec());
                }
                if needs[b.0] {
                    acc(*b, dy.to_vec());
                }
            }
            Op::Sum { input } => {
                if needs[input.0] {
                    acc(*input, vec![dy[0]; self.nodes[input.0].value.numel()]);
                }
            }
            Op::CrossEntropy { logits, labels, smoothing, log_probs } => {
                if needs[logits.0] {
                    let n = labels.len();
                    let k = log_probs.len() / n;
                    let scale = dy[0] / T::lit(n as f64);
                    let off = *smoothing / T::lit(k as f64);
                    let on = T::one() - *smoothing;
                    let mut dz = vec![T::zero(); n * k];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { on + off } else { off };
                            dz[r * k + j] = (log_probs[r * k + j].exp() - target) * scale;
                        }
                    }
                    acc(*logits, dz);
                }
            }
        }
    }
}
