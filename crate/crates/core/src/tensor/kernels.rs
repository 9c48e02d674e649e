//! Forward and backward kernels on flat row-major buffers.

use serde::{Deserialize, Serialize};

use super::{Real, Result, TensorError};

/// Stride, padding and grouping of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride: [stride, stride], padding: [padding, padding], groups }
    }

    /// Output spatial size for an `h × w` input and `kh × kw` kernel.
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let axis = |size: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if s == 0 {
                return Err(TensorError::Geometry { op: "conv2d", detail: "zero stride".into() });
            }
            let padded = size + 2 * p;
            if k == 0 || padded < k {
                return Err(TensorError::Geometry {
                    op: "conv2d",
                    detail: format!("kernel {k} does not fit padded extent {padded}"),
                });
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, kh, self.stride[0], self.padding[0])?,
            axis(w, kw, self.stride[1], self.padding[1])?,
        ))
    }
}

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<Self> {
        let dim = |detail: String| TensorError::Dimension { op: "conv2d", detail };
        if input.len() != 4 || weight.len() != 4 {
            return Err(dim(format!("expected rank-4 input and weight, got {input:?} and {weight:?}")));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let g = geom.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(dim(format!("channels {cin}->{cout} not divisible by groups {g}")));
        }
        if cin / g != cin_g {
            return Err(dim(format!("weight expects {cin_g} inputs per group, input has {}", cin / g)));
        }
        let (ho, wo) = geom.output_hw(h, w, kh, kw)?;
        Ok(Self { n, cin, h, w, cout, kh, kw, ho, wo, geom })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.geom.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.geom.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }
}

/// Unfolds one group of one sample (`cin_g × h × w`) into `[patch, ho·wo]`.
fn im2col<T: Real>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let (sh, sw) = (d.geom.stride[0], d.geom.stride[1]);
    let (ph, pw) = (d.geom.padding[0] as isize, d.geom.padding[1] as isize);
    for c in 0..d.cin_g() {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph;
                    for ox in 0..d.wo {
                        let ix = (ox * sw + kx) as isize - pw;
                        dst[oy * d.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[patch, ho·wo]` back onto one group of one sample, accumulating.
fn col2im<T: Real>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let (sh, sw) = (d.geom.stride[0], d.geom.stride[1]);
    let (ph, pw) = (d.geom.padding[0] as isize, d.geom.padding[1] as isize);
    for c in 0..d.cin_g() {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * sw + kx) as isize - pw;
                        if ix >= 0 && (ix as usize) < d.w {
                            let v = &mut plane[iy as usize * d.w + ix as usize];
                            *v = *v + src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let hw_out = d.ho * d.wo;
    let (cin_g, cout_g, patch) = (d.cin_g(), d.cout_g(), d.patch());
    let mut out = vec![T::zero(); d.n * d.cout * hw_out];
    let mut col = vec![T::zero(); patch * hw_out];
    for n in 0..d.n {
        for g in 0..d.geom.groups {
            let x_start = (n * d.cin + g * cin_g) * d.h * d.w;
            im2col(&x[x_start..x_start + cin_g * d.h * d.w], d, &mut col);
            let w_g = &weight[g * cout_g * patch..(g + 1) * cout_g * patch];
            let o_start = (n * d.cout + g * cout_g) * hw_out;
            let o_g = &mut out[o_start..o_start + cout_g * hw_out];
            T::gemm(cout_g, patch, hw_out, w_g, patch as isize, 1, &col, hw_out as isize, 1, T::zero(), o_g, hw_out as isize, 1);
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(dy: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let hw_out = d.ho * d.wo;
    let (cin_g, cout_g, patch) = (d.cin_g(), d.cout_g(), d.patch());
    let mut dx = vec![T::zero(); d.n * d.cin * d.h * d.w];
    let mut dcol = vec![T::zero(); patch * hw_out];
    for n in 0..d.n {
        for g in 0..d.geom.groups {
            let w_g = &weight[g * cout_g * patch..(g + 1) * cout_g * patch];
            let o_start = (n * d.cout + g * cout_g) * hw_out;
            let dy_g = &dy[o_start..o_start + cout_g * hw_out];
            // dcol = W_gᵀ · dY_g
            T::gemm(patch, cout_g, hw_out, w_g, 1, patch as isize, dy_g, hw_out as isize, 1, T::zero(), &mut dcol, hw_out as isize, 1);
            let x_start = (n * d.cin + g * cin_g) * d.h * d.w;
            col2im(&dcol, d, &mut dx[x_start..x_start + cin_g * d.h * d.w]);
        }
    }
    dx
}

pub(crate) fn conv2d_backward_weight<T: Real>(dy: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let hw_out = d.ho * d.wo;
    let (cin_g, cout_g, patch) = (d.cin_g(), d.cout_g(), d.patch());
    let mut dw = vec![T::zero(); d.cout * patch];
    let mut col = vec![T::zero(); patch * hw_out];
    for n in 0..d.n {
        for g in 0..d.geom.groups {
            let x_start = (n * d.cin + g * cin_g) * d.h * d.w;
            im2col(&x[x_start..x_start + cin_g * d.h * d.w], d, &mut col);
            let o_start = (n * d.cout + g * cout_g) * hw_out;
            let dy_g = &dy[o_start..o_start + cout_g * hw_out];
            let dw_g = &mut dw[g * cout_g * patch..(g + 1) * cout_g * patch];
            // dW_g += dY_g · colᵀ
            T::gemm(cout_g, hw_out, patch, dy_g, hw_out as isize, 1, &col, 1, hw_out as isize, T::one(), dw_g, patch as isize, 1);
        }
    }
    dw
}

/// Per-channel statistics of an `[N, C, inner]` buffer: (mean, biased variance).
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let m = T::lit((n * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * inner;
            for &v in &x[start..start + inner] {
                s = s + v;
            }
        }
        let mu = s / m;
        let mut sq = T::zero();
        for b in 0..n {
            let start = (b * c + ch) * inner;
            for &v in &x[start..start + inner] {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}

/// Applies `(x − mean)·inv_std·γ + β` per channel; returns (y, x̂).
pub(crate) fn normalize_affine<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    inner: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * inner;
            for i in start..start + inner {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = h * gamma[ch] + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Per-channel sums of `dy` and `dy·x̂`.
pub(crate) fn channel_grad_sums<T: Real>(dy: &[T], xhat: &[T], n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * inner;
            for i in start..start + inner {
                dbeta[ch] = dbeta[ch] + dy[i];
                dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
            }
        }
    }
    (dgamma, dbeta)
}

/// Row-wise log-softmax of `[n, k]` logits, max-subtracted.
pub(crate) fn log_softmax<T: Real>(logits: &[T], n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        for j in 0..k {
            out[i * k + j] = row[j] - lse;
        }
    }
    out
}
