use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};

const NOISE_STD: f64 = 60.0;
const ANGLE_JITTER: f64 = 0.3;
const AMPLITUDE: (f64, f64) = (40.0, 70.0);

/// Three-channel `size x size` images, `per_class` per class, labels
/// cycling through the classes.
///
/// Class `k` is a linear intensity ramp pointing at angle `2πk/M` (jittered
/// by up to 30% of half the gap to its neighbours), with random amplitude
/// and brightness and independent per-pixel Gaussian noise.
pub fn synth_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Validation(format!("synthetic data needs at least 2 classes, got {num_classes}")));
    }
    if size == 0 {
        return Err(Error::Validation("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let count = num_classes * per_class;
    let plane = size * size;
    let center = (size as f64 - 1.0) / 2.0;
    let gap = PI / num_classes as f64;
    let mut images = Vec::with_capacity(count * 3 * plane);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let k = i % num_classes;
        let theta = 2.0 * gap * k as f64 + rng.random_range(-ANGLE_JITTER..=ANGLE_JITTER) * gap;
        let amp = rng.random_range(AMPLITUDE.0..AMPLITUDE.1);
        let base = 128.0 + rng.random_range(-25.0..25.0);
        let (c, s) = (theta.cos(), theta.sin());
        for _ in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 - center) / size as f64;
                    let v = (y as f64 - center) / size as f64;
                    let p = base + amp * (u * c + v * s) + noise.sample(&mut rng);
                    images.push(p.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(images, [3, size, size], labels, num_classes, Split::Train)
}

const TEST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// A training set with `per_class` samples per class and a test set with
/// half as many, drawn from independent streams of the same seed.
pub fn synth_splits(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synth_dataset(num_classes, per_class, size, seed)?;
    let test = synth_dataset(num_classes, (per_class / 2).max(1), size, seed ^ TEST_STREAM)?;
    Ok((train, test.with_split(Split::Test)))
}

impl Dataset {
    /// Same samples tagged with another split.
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}
