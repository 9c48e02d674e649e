use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, Split};

/// Class-conditional pattern images: every class owns a fixed template of
/// plane waves and a Gaussian blob per channel. Samples jitter the template
/// by a small shift and contrast change, then add pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    /// Samples per class in the companion test split.
    pub test_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 3, per_class: 500, image_size: 8, channels: 3, noise: 1.0, test_per_class: 500 }
    }
}

struct Templates {
    /// `[class][channel][y][x]`, values in roughly `[-1, 1]`.
    maps: Vec<Vec<f32>>,
    size: usize,
    channels: usize,
}

impl Templates {
    fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.image_size;
        let n = s as f64;
        let mut maps = Vec::with_capacity(spec.classes);
        for _ in 0..spec.classes {
            let mut map = vec![0.0f32; spec.channels * s * s];
            for c in 0..spec.channels {
                let fx = rng.random_range(0..3) as f64;
                let fy = rng.random_range(0..3) as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let (bx, by) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let width = n / 4.0;
                for y in 0..s {
                    for x in 0..s {
                        let wave = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / n + phase).cos();
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        let blob = sign * (-d2 / (2.0 * width * width)).exp();
                        map[(c * s + y) * s + x] = (0.5 * wave + 0.5 * blob) as f32;
                    }
                }
            }
            maps.push(map);
        }
        Self { maps, size: s, channels: spec.channels }
    }

    fn sample(&self, class: usize, noise: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        let s = self.size as isize;
        let (dy, dx, contrast) = if noise > 0.0 {
            (rng.random_range(-1..=1i32) as isize, rng.random_range(-1..=1i32) as isize, rng.random_range(0.6..1.4))
        } else {
            (0, 0, 1.0)
        };
        let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
        let map = &self.maps[class];
        for c in 0..self.channels as isize {
            for y in 0..s {
                for x in 0..s {
                    let sy = (y + dy).rem_euclid(s);
                    let sx = (x + dx).rem_euclid(s);
                    let t = f64::from(map[((c * s + sy) * s + sx) as usize]);
                    let eps = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                    out.push((0.5 + 0.25 * contrast * t + 0.25 * eps).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
}

fn generate(
    templates: &Templates,
    spec: &SynthSpec,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<usize>) {
    let n = per_class * spec.classes;
    let mut pixels = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        templates.sample(class, spec.noise, rng, &mut pixels);
        labels.push(class);
    }
    (pixels, labels)
}

fn check(spec: &SynthSpec) -> Result<()> {
    if spec.classes < 2 || spec.image_size == 0 || spec.channels == 0 {
        return Err(DataError::Split(format!(
            "synthetic data needs ≥ 2 classes and non-empty images, got {spec:?}"
        )));
    }
    Ok(())
}

/// A training split of `spec.per_class` samples per class, interleaved by class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    Ok(synth_splits(spec, seed)?.0)
}

/// Training and test splits drawn from the same class templates; the test
/// split reuses the training normalization.
pub fn synth_splits(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = Templates::draw(spec, &mut rng);
    let (s, c) = (spec.image_size, spec.channels);
    let (train_px, train_labels) = generate(&templates, spec, spec.per_class, &mut rng);
    let (test_px, test_labels) = generate(&templates, spec, spec.test_per_class, &mut rng);
    let train = Dataset::from_raw(
        train_px,
        [train_labels.len(), c, s, s],
        train_labels,
        spec.classes,
        Split::Train,
        None,
    )?;
    let test = Dataset::from_raw(
        test_px,
        [test_labels.len(), c, s, s],
        test_labels,
        spec.classes,
        Split::Test,
        Some(train.normalization()),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_samples_of_a_class_match() {
        let spec = SynthSpec { noise: 0.0, per_class: 4, ..Default::default() };
        let d = synth_dataset(&spec, 3).unwrap();
        let stride = 3 * 8 * 8;
        let data = d.images().data();
        // samples 0 and 3 are both class 0
        assert_eq!(d.labels()[0], d.labels()[3]);
        assert_eq!(data[..stride], data[3 * stride..4 * stride]);
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SynthSpec { per_class: 10, ..Default::default() };
        assert_eq!(synth_splits(&spec, 9).unwrap(), synth_splits(&spec, 9).unwrap());
        assert_ne!(synth_dataset(&spec, 9).unwrap(), synth_dataset(&spec, 10).unwrap());
    }

    #[test]
    fn rejects_single_class() {
        let spec = SynthSpec { classes: 1, ..Default::default() };
        assert!(synth_dataset(&spec, 0).is_err());
    }
}
