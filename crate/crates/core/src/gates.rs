//! Channel-importance gates learned on frozen random weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{shuffled_batches, DataError, Dataset, Split};
use crate::model::{Mode, Model};
use crate::optim::{Adam, AdamParams};
use crate::tensor::{Graph, Real, Tensor, TensorError};
use crate::train::evaluate;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("gate learning diverged at step {step}")]
    Divergence { step: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid importance config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = GateError> = std::result::Result<T, E>;

/// Gate vectors `λ_j ∈ [0, 1]^{C_j}`, one per gated layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub lambda: Vec<Vec<f32>>,
    /// Optimizer steps taken to reach this state.
    pub step: usize,
}

impl GateState {
    pub fn new(lambda: Vec<Vec<f32>>) -> Self {
        Self { lambda, step: 0 }
    }

    /// All gates at 1.0, the identity modulation.
    pub fn ones(widths: &[usize]) -> Self {
        Self::new(widths.iter().map(|&w| vec![1.0; w]).collect())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.lambda.iter().map(Vec::len).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.lambda.iter().map(Vec::len).sum()
    }

    /// Element-wise mean of all gates.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_channels();
        if total == 0 {
            return 0.0;
        }
        self.lambda.iter().flatten().map(|&g| f64::from(g).abs()).sum::<f64>() / total as f64
    }

    pub fn flattened(&self) -> Vec<f32> {
        self.lambda.iter().flatten().copied().collect()
    }

    pub fn in_box(&self) -> bool {
        self.lambda.iter().flatten().all(|g| (0.0..=1.0).contains(g))
    }
}

/// Clamps every gate into `[0, 1]`.
pub fn project_gates(mut gates: GateState) -> GateState {
    gates.lambda.iter_mut().flatten().for_each(|g| *g = g.clamp(0.0, 1.0));
    gates
}

/// `(mean(Λ) − r)²`.
pub fn sparsity_penalty(gates: &GateState, r: f64) -> f64 {
    (gates.sparsity() - r).powi(2)
}

/// Derivative of [`sparsity_penalty`] with respect to any single gate.
pub fn sparsity_penalty_grad(gates: &GateState, r: f64) -> f64 {
    let total = gates.total_channels().max(1) as f64;
    2.0 * (gates.sparsity() - r) / total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `(mean(Λ) − r)²`.
    #[default]
    SquaredDeviation,
    /// `Σ_j ‖λ_j‖₁`, kept for ablations.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub gamma: f64,
    pub target_sparsity: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub regularizer: Regularizer,
    /// Validation snapshots taken per epoch, evenly spaced; the last always
    /// closes the epoch.
    pub snapshots_per_epoch: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            target_sparsity: 0.5,
            epochs: 10,
            lr: 0.01,
            batch_size: 128,
            adam: AdamParams::default(),
            regularizer: Regularizer::SquaredDeviation,
            snapshots_per_epoch: 1,
        }
    }
}

impl ImportanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(GateError::Config(format!("gamma {} must be finite and non-negative", self.gamma)));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity <= 1.0) {
            return Err(GateError::Config(format!("target sparsity {} outside (0, 1]", self.target_sparsity)));
        }
        if self.batch_size == 0 || self.snapshots_per_epoch == 0 {
            return Err(GateError::Config("batch size and snapshots per epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GateError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub gates: GateState,
    pub val_accuracy: f64,
    pub epoch: usize,
    pub sparsity: f64,
    /// Mean training cross-entropy over the steps since the previous snapshot.
    pub train_loss: f64,
}

/// Value and gate gradient of `L_CE + γ·Ω` on one batch.
#[derive(Debug, Clone)]
pub struct GateObjective<T: Real> {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub grads: Vec<Vec<T>>,
}

/// Evaluates the gate objective. Only gates receive gradients; model weights
/// are read, never written (BN running statistics do update in train mode).
pub fn gate_objective<T: Real>(
    model: &mut Model<T>,
    images: Tensor<T>,
    labels: &[usize],
    gates: &[Vec<T>],
    cfg: &ImportanceConfig,
    mode: Mode,
) -> Result<GateObjective<T>> {
    let mut g = Graph::new();
    let fp = model.forward(&mut g, images, Some(gates), mode, false)?;
    let loss = g.cross_entropy(fp.logits, labels, 0.0)?;
    let ce = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss, &fp.gates)?;
    // evaluated in f64 from the supplied values so that f64 finite
    // differences see exactly this function
    let total = gates.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mean = gates.iter().flatten().map(|x| x.to_f64_lossy()).sum::<f64>() / total;
    let (penalty, pen_grad): (f64, Box<dyn Fn(T) -> f64>) = match cfg.regularizer {
        Regularizer::SquaredDeviation => {
            let r = cfg.target_sparsity;
            ((mean - r).powi(2), Box::new(move |_| 2.0 * (mean - r) / total))
        }
        Regularizer::L1 => (
            gates.iter().flatten().map(|x| x.to_f64_lossy().abs()).sum(),
            Box::new(|x: T| if x < T::zero() { -1.0 } else { 1.0 }),
        ),
    };
    let grads = grads
        .into_iter()
        .zip(gates)
        .map(|(t, gv)| {
            t.data()
                .iter()
                .zip(gv)
                .map(|(&d, &x)| T::lit(d.to_f64_lossy() + cfg.gamma * pen_grad(x)))
                .collect()
        })
        .collect();
    Ok(GateObjective { total: ce + cfg.gamma * penalty, cross_entropy: ce, penalty, grads })
}

/// Learns gates from all-ones by projected Adam on `L_CE + γ·Ω`, leaving
/// weights untouched. Returns every validation snapshot in order.
pub fn learn_channel_importance(
    model: &mut Model<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &ImportanceConfig,
    seed: u64,
) -> Result<Vec<GateSnapshot>> {
    cfg.validate()?;
    train.require_split("gate learning", &[Split::Train])?;
    val.require_split("gate learning", &[Split::Val])?;
    if train.is_empty() || val.is_empty() {
        return Err(GateError::Contract("gate learning needs non-empty train and validation splits".into()));
    }
    let mut state = GateState::ones(&model.gate_widths());
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snapshots = Vec::with_capacity(cfg.epochs * cfg.snapshots_per_epoch);
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let marks = snapshot_marks(batches.len(), cfg.snapshots_per_epoch);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let step = state.step;
            let (images, labels) = train.batch(idx, Some(&mut rng));
            let obj = match gate_objective(model, images, &labels, &state.lambda, cfg, Mode::Train) {
                Err(GateError::Tensor(TensorError::NonFinite { .. })) => return Err(GateError::Divergence { step }),
                other => other?,
            };
            if !obj.total.is_finite() || obj.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(GateError::Divergence { step });
            }
            loss_sum += obj.cross_entropy;
            loss_count += 1;
            {
                let mut values: Vec<&mut [f32]> = state.lambda.iter_mut().map(Vec::as_mut_slice).collect();
                let grads: Vec<&[f32]> = obj.grads.iter().map(Vec::as_slice).collect();
                adam.step(cfg.lr, &mut values, &grads);
            }
            state = project_gates(state);
            state.step += 1;
            if marks.contains(&b) {
                let eval = evaluate(model, val, Some(&state.lambda), cfg.batch_size)?;
                let train_loss = loss_sum / loss_count.max(1) as f64;
                log::debug!(
                    "gates epoch {epoch} step {}: sparsity {:.4}, val acc {:.4}, train ce {train_loss:.4}",
                    state.step,
                    state.sparsity(),
                    eval.accuracy
                );
                snapshots.push(GateSnapshot {
                    sparsity: state.sparsity(),
                    gates: state.clone(),
                    val_accuracy: eval.accuracy,
                    epoch,
                    train_loss,
                });
                (loss_sum, loss_count) = (0.0, 0);
            }
        }
    }
    Ok(snapshots)
}

/// Batch indices after which a snapshot is taken.
fn snapshot_marks(batches: usize, per_epoch: usize) -> Vec<usize> {
    let per_epoch = per_epoch.min(batches).max(1);
    (1..=per_epoch).map(|k| (k * batches).div_ceil(per_epoch) - 1).collect()
}

/// The snapshot with sparsity ≤ `r` and the best validation accuracy, later
/// snapshots winning ties. Falls back to the sparsest snapshot, with a
/// warning, when none meets the target.
pub fn select_best_gates(snapshots: &[GateSnapshot], r: f64) -> Result<&GateSnapshot> {
    if snapshots.is_empty() {
        return Err(GateError::Contract("no gate snapshots to select from".into()));
    }
    let best = snapshots
        .iter()
        .filter(|s| s.sparsity <= r)
        .fold(None::<&GateSnapshot>, |best, s| match best {
            Some(b) if b.val_accuracy > s.val_accuracy => Some(b),
            _ => Some(s),
        });
    Ok(match best {
        Some(s) => s,
        None => {
            let s = snapshots
                .iter()
                .fold(&snapshots[0], |m, s| if s.sparsity < m.sparsity { s } else { m });
            log::warn!(
                "no gate snapshot reaches sparsity {r}; using the sparsest one ({:.4}, epoch {})",
                s.sparsity,
                s.epoch
            );
            s
        }
    })
}
