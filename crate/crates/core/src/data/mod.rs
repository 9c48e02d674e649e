//! Datasets, splits and persisted run artifacts.

pub mod archive;
pub mod cifar;
pub mod record;
mod synth;

pub use synth::{synth_dataset, synth_splits, SynthSpec};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("corrupt data at byte offset {offset}: {detail}")]
    Corruption { offset: u64, detail: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("{api} may not read the {split:?} split")]
    Leakage { api: &'static str, split: Split },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("record error: {0}")]
    Record(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel mean and standard deviation applied to raw `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Statistics of `[N, C, H, W]` raw pixels.
    pub fn fit(pixels: &[f32], shape: [usize; 4]) -> Self {
        let [n, c, h, w] = shape;
        let inner = h * w;
        let count = (n * inner).max(1) as f64;
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |b| pixels[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter());
            let mu = vals().map(|&v| v as f64).sum::<f64>() / count;
            let var = vals().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / count;
            mean[ch] = mu as f32;
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, pixels: &mut [f32], shape: [usize; 4]) {
        let [_, c, h, w] = shape;
        let inner = h * w;
        for (i, v) in pixels.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

/// Training-time augmentation: zero-pad-and-crop plus horizontal flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augmentation {
    pub pad: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const NONE: Self = Self { pad: 0, flip: false };
    pub const CIFAR: Self = Self { pad: 4, flip: true };

    pub fn is_none(&self) -> bool {
        self.pad == 0 && !self.flip
    }
}

/// An image classification split held in memory, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    split: Split,
    class_count: usize,
    normalization: Normalization,
    augmentation: Augmentation,
}

impl Dataset {
    /// Normalizes raw `[0, 1]` pixels. Statistics are fitted on this data
    /// when `normalization` is `None` (training splits) and reused otherwise.
    pub fn from_raw(
        mut pixels: Vec<f32>,
        shape: [usize; 4],
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
        normalization: Option<&Normalization>,
    ) -> Result<Self> {
        if labels.len() != shape[0] || pixels.len() != shape.iter().product::<usize>() {
            return Err(DataError::Split(format!(
                "{} labels and {} values for shape {shape:?}",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Split(format!("label {bad} outside {class_count} classes")));
        }
        let normalization = normalization.cloned().unwrap_or_else(|| Normalization::fit(&pixels, shape));
        normalization.apply(&mut pixels, shape);
        let images = Tensor::new(shape.to_vec(), pixels).expect("length checked");
        Ok(Self { images, labels, split, class_count, normalization, augmentation: Augmentation::NONE })
    }

    pub fn with_augmentation(mut self, augmentation: Augmentation) -> Self {
        self.augmentation = augmentation;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn augmentation(&self) -> Augmentation {
        self.augmentation
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Fails unless this split is one of `allowed`.
    pub fn require_split(&self, api: &'static str, allowed: &[Split]) -> Result<()> {
        if allowed.contains(&self.split) {
            Ok(())
        } else {
            Err(DataError::Leakage { api, split: self.split })
        }
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: self.images.select_rows(indices).expect("indices in range"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            class_count: self.class_count,
            normalization: self.normalization.clone(),
            augmentation: self.augmentation,
        }
    }

    /// Gathers `indices` into one batch, augmenting when `rng` is given.
    pub fn batch(&self, indices: &[usize], rng: Option<&mut ChaCha8Rng>) -> (Tensor<f32>, Vec<usize>) {
        let images = self.images.select_rows(indices).expect("indices in range");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match rng {
            Some(rng) if !self.augmentation.is_none() => (augment(images, self.augmentation, rng), labels),
            _ => (images, labels),
        }
    }
}

fn augment(images: Tensor<f32>, aug: Augmentation, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let shape = images.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let src = images.into_data();
    let mut out = vec![0.0f32; src.len()];
    let p = aug.pad as isize;
    for b in 0..n {
        let dy = if aug.pad > 0 { rng.random_range(0..=2 * aug.pad) as isize - p } else { 0 };
        let dx = if aug.pad > 0 { rng.random_range(0..=2 * aug.pad) as isize - p } else { 0 };
        let flip = aug.flip && rng.random_bool(0.5);
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Splits `0..n` into shuffled batches; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Takes exactly `per_class` samples of every class into a validation split
/// by seeded shuffle; the remainder stays in training order.
pub fn make_validation_split(train: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, val_idx) = validation_indices(train.labels(), train.class_count(), per_class, seed)?;
    Ok((train.subset(&train_idx, train.split()), train.subset(&val_idx, Split::Val)))
}

/// Index sets behind [`make_validation_split`], both sorted.
pub fn validation_indices(
    labels: &[usize],
    class_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::with_capacity(per_class * class_count);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(DataError::Split(format!(
                "class {class} has {} samples, {per_class} requested for validation",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..per_class]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; labels.len()];
    val.iter().for_each(|&i| in_val[i] = true);
    let train = (0..labels.len()).filter(|&i| !in_val[i]).collect();
    Ok((train, val))
}
