//! Training from scratch: schedules, budget scaling and evaluation.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{shuffled_batches, DataError, Dataset, Split};
use crate::model::{Mode, Model};
use crate::optim::{Adam, AdamParams, Sgd};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("training diverged in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam(AdamParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    /// Multiply by `factor` once each milestone (a fraction of the run) passes.
    StepDecay { milestones: Vec<f64>, factor: f64 },
    /// Per-step cosine annealing to zero.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub base_epochs: usize,
    pub effective_epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr_policy: LrPolicy,
    pub lr0: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::step_decay(10)
    }
}

impl TrainSchedule {
    /// SGD (momentum 0.9, weight decay 5e-4), lr 0.1, ×0.1 decay at 50% and
    /// 75% of the run.
    pub fn step_decay(epochs: usize) -> Self {
        Self {
            base_epochs: epochs,
            effective_epochs: epochs,
            optimizer: OptimizerKind::Sgd { momentum: 0.9, weight_decay: 5e-4 },
            lr_policy: LrPolicy::StepDecay { milestones: vec![0.5, 0.75], factor: 0.1 },
            lr0: 0.1,
            batch_size: 64,
            label_smoothing: 0.0,
        }
    }

    /// Scales `effective_epochs` so the pruned model gets the full model's
    /// compute budget.
    pub fn with_budget(mut self, full_flops: u64, pruned_flops: u64) -> Result<Self> {
        self.effective_epochs = budget_epochs(self.base_epochs, full_flops, pruned_flops)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Precondition("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::Precondition(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Precondition(format!("learning rate {} must be non-negative", self.lr0)));
        }
        Ok(())
    }

    /// Learning rate for `step` of `steps_per_epoch` in `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        match &self.lr_policy {
            LrPolicy::Cosine => {
                let total = self.effective_epochs * steps_per_epoch;
                cosine_lr(epoch * steps_per_epoch + step, total, self.lr0)
            }
            LrPolicy::StepDecay { milestones, factor } => {
                let progress = epoch as f64 / self.effective_epochs.max(1) as f64;
                let passed = milestones.iter().filter(|&&m| progress >= m).count();
                self.lr0 * factor.powi(passed as i32)
            }
        }
    }
}

/// `round(base · full / pruned)`.
pub fn budget_epochs(base_epochs: usize, full_flops: u64, pruned_flops: u64) -> Result<usize> {
    if pruned_flops == 0 || pruned_flops > full_flops {
        return Err(TrainError::Precondition(format!(
            "pruned FLOPS {pruned_flops} must lie in (0, {full_flops}]"
        )));
    }
    // exact integer round-half-up of base·full/pruned
    let num = base_epochs as u128 * full_flops as u128;
    let den = pruned_flops as u128;
    Ok(((2 * num + den) / (2 * den)) as usize)
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Mean cross-entropy against `(1 − eps)` on the true class plus `eps/K`
/// spread uniformly.
pub fn label_smooth_loss(logits: &Tensor<f32>, labels: &[usize], eps: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TrainError::Precondition(format!("label smoothing {eps} outside [0, 1)")));
    }
    let mut g = Graph::new();
    let x = g.leaf(logits.clone());
    let loss = g.cross_entropy(x, labels, eps)?;
    Ok(f64::from(g.value(loss).data()[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy in eval mode.
pub fn evaluate(
    model: &mut Model<f32>,
    data: &Dataset,
    gates: Option<&[Vec<f32>]>,
    batch_size: usize,
) -> Result<Evaluation, TensorError> {
    if data.is_empty() {
        return Ok(Evaluation { accuracy: 0.0, loss: 0.0 });
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(idx, None);
        let mut g = Graph::new();
        let fp = model.forward(&mut g, images, gates, Mode::Eval, false)?;
        let loss = g.cross_entropy(fp.logits, &labels, 0.0)?;
        loss_sum += f64::from(g.value(loss).data()[0]) * idx.len() as f64;
        let logits = g.value(fp.logits);
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, loss: loss_sum / data.len() as f64 })
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub flops: u64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// Per-epoch metrics as CSV with columns `epoch,lr,train_loss,val_acc`.
    pub fn metrics_csv(&self) -> Result<String, DataError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "lr", "train_loss", "val_acc"])?;
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([e.epoch.to_string(), e.lr.to_string(), e.train_loss.to_string(), val])?;
        }
        let bytes = w.into_inner().map_err(|e| DataError::Record(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.metrics_csv()?).map_err(|e| DataError::io(path, e))
    }
}

/// Called after every epoch with the epoch index and the model.
pub type EpochHook<'a> = dyn FnMut(usize, &Model<f32>) -> Result<()> + 'a;

/// Trains `model` for `schedule.effective_epochs` and scores the test split
/// once at the end. Sample order and augmentation derive from `seed` only.
pub fn train_from_scratch(
    model: &mut Model<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    train_with_hook(model, train, val, test, schedule, seed, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    model: &mut Model<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<TrainReport> {
    schedule.validate()?;
    train.require_split("training", &[Split::Train])?;
    if let Some(v) = val {
        v.require_split("training validation", &[Split::Val])?;
    }
    test.require_split("final evaluation", &[Split::Test])?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer);
    let mut epochs = Vec::with_capacity(schedule.effective_epochs);
    for epoch in 0..schedule.effective_epochs {
        let batches = shuffled_batches(train.len(), schedule.batch_size, &mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        let mut lr = schedule.lr_at(epoch, 0, batches.len());
        for (b, idx) in batches.iter().enumerate() {
            lr = schedule.lr_at(epoch, b, batches.len());
            let (images, labels) = train.batch(idx, Some(&mut rng));
            let mut g = Graph::new();
            let fp = match model.forward(&mut g, images, None, Mode::Train, true) {
                Err(TensorError::NonFinite { .. }) => return Err(TrainError::Divergence { epoch }),
                other => other?,
            };
            let loss = g.cross_entropy(fp.logits, &labels, schedule.label_smoothing)?;
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
            let grads = g.backward(loss, &fp.params)?;
            let mut params = model.params_mut();
            let mut values: Vec<&mut [f32]> = params.iter_mut().map(|t| t.data_mut()).collect();
            let grad_slices: Vec<&[f32]> = grads.iter().map(Tensor::data).collect();
            opt.step(lr, &mut values, &grad_slices);
            if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::Divergence { epoch });
            }
        }
        let val_acc = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, None, schedule.batch_size)?.accuracy),
            _ => None,
        };
        let train_loss = loss_sum / seen.max(1) as f64;
        log::debug!("epoch {epoch}: lr {lr:.5}, train loss {train_loss:.4}, val acc {val_acc:?}");
        epochs.push(EpochMetrics { epoch, lr, train_loss, val_acc });
        hook(epoch, model)?;
    }
    let test_accuracy = evaluate(model, test, None, schedule.batch_size)?.accuracy;
    Ok(TrainReport {
        epochs,
        test_accuracy,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed,
        flops: model.flops(),
    })
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd { momentum, weight_decay } => Self::Sgd(Sgd::new(momentum, weight_decay)),
            OptimizerKind::Adam(p) => Self::Adam(Adam::new(p)),
        }
    }

    fn step(&mut self, lr: f64, values: &mut [&mut [f32]], grads: &[&[f32]]) {
        match self {
            Self::Sgd(o) => o.step(lr, values, grads),
            Self::Adam(o) => o.step(lr, values, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(budget_epochs(160, 1000, 1000).unwrap(), 160);
        assert_eq!(budget_epochs(160, 1000, 500).unwrap(), 320);
        assert_eq!(budget_epochs(160, 1000, 400).unwrap(), 400);
        assert!(budget_epochs(160, 1000, 0).is_err());
        assert!(budget_epochs(160, 1000, 1001).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn step_decay_milestones() {
        let s = TrainSchedule::step_decay(8);
        let lrs: Vec<f64> = (0..8).map(|e| s.lr_at(e, 0, 10)).collect();
        assert_eq!(lrs[..4], [0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-12 && (lrs[5] - 0.01).abs() < 1e-12);
        assert!((lrs[6] - 0.001).abs() < 1e-12 && (lrs[7] - 0.001).abs() < 1e-12);
    }

    #[test]
    fn smoothing_on_uniform_logits_is_log_k() {
        let logits = Tensor::zeros([3, 7]);
        for eps in [0.0, 0.1, 0.5] {
            let l = label_smooth_loss(&logits, &[0, 3, 6], eps).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-6);
        }
        assert!(label_smooth_loss(&logits, &[0, 3, 6], 1.0).is_err());
    }
}
