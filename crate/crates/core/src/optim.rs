//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment estimates are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self { params, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, lr: f64, values: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(values.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (value, grad)) in values.iter_mut().zip(grads).enumerate() {
            for (j, (w, g)) in value.iter_mut().zip(grad.iter()).enumerate() {
                let g = g.to_f64_lossy();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::lit(w.to_f64_lossy() - update);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, lr: f64, values: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(values.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = values.iter().map(|v| vec![0.0; v.len()]).collect();
        }
        for (i, (value, grad)) in values.iter_mut().zip(grads).enumerate() {
            for (j, (w, g)) in value.iter_mut().zip(grad.iter()).enumerate() {
                let wf = w.to_f64_lossy();
                let d = g.to_f64_lossy() + self.weight_decay * wf;
                let v = &mut self.velocity[i][j];
                *v = self.momentum * *v + d;
                *w = T::lit(wf - lr * *v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut adam = Adam::new(AdamParams::default());
        let mut w = vec![1.0f64, 1.0];
        adam.step(0.1, &mut [&mut w[..]], &[&[3.0, -0.5][..]]);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut w = vec![0.0f64];
        sgd.step(1.0, &mut [&mut w[..]], &[&[1.0][..]]);
        assert_eq!(w[0], -1.0);
        sgd.step(1.0, &mut [&mut w[..]], &[&[1.0][..]]);
        assert!((w[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut sgd = Sgd::new(0.0, 0.5);
        let mut w = vec![2.0f64];
        sgd.step(0.1, &mut [&mut w[..]], &[&[0.0][..]]);
        assert!((w[0] - 1.9).abs() < 1e-12);
    }
}
