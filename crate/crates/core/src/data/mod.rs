//! Image datasets, augmentation and batching.

mod augment;
mod cifar;
mod synth;

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use augment::{augment, augment_with, hflip, normalize, reflect_index, AugmentConfig};
pub use cifar::{load_cifar100, load_cifar_binary, write_cifar_binary, CifarLayout, CIFAR100_TEST, CIFAR100_TRAIN};
pub use synth::{synth_dataset, synth_splits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// 8-bit images `[count, C, H, W]` with integer labels in `[0, M)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<u8>,
    dims: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    stats: OnceLock<ChannelStats>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.dims == other.dims
            && self.labels == other.labels
            && self.num_classes == other.num_classes
            && self.split == other.split
    }
}

impl Dataset {
    pub fn new(images: Vec<u8>, dims: [usize; 3], labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} image bytes for {} samples of {dims:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index { what: "label", index: bad, limit: num_classes });
        }
        Ok(Dataset {
            images,
            dims,
            labels,
            num_classes,
            split,
            stats: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of every image.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let per = self.dims.iter().product::<usize>();
        &self.images[index * per..(index + 1) * per]
    }

    /// Samples `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let images = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            images,
            dims: self.dims,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            stats: OnceLock::new(),
        }
    }

    /// The first `per_class` samples of each of the classes `0..classes`,
    /// in dataset order, as a `classes`-way dataset.
    pub fn class_subset(&self, classes: usize, per_class: usize) -> Result<Dataset> {
        if classes == 0 || classes > self.num_classes {
            return Err(Error::Validation(format!(
                "cannot keep {classes} of {} classes",
                self.num_classes
            )));
        }
        let mut taken = vec![0; classes];
        let mut keep = Vec::with_capacity(classes * per_class);
        for (i, &y) in self.labels.iter().enumerate() {
            if y < classes && taken[y] < per_class {
                taken[y] += 1;
                keep.push(i);
            }
        }
        let mut out = self.subset(&keep);
        out.num_classes = classes;
        Ok(out)
    }

    /// Channel statistics, computed on first use.
    pub fn channel_stats(&self) -> &ChannelStats {
        self.stats.get_or_init(|| {
            let [c, h, w] = self.dims;
            let plane = h * w;
            let mut sum = vec![0f64; c];
            let mut sq = vec![0f64; c];
            for img in self.images.chunks(c * plane) {
                for ch in 0..c {
                    for &p in &img[ch * plane..(ch + 1) * plane] {
                        let v = p as f64 / 255.0;
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
            }
            let n = (self.len() * plane).max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
                .collect();
            ChannelStats { mean, std }
        })
    }

    /// Normalized images of `indices` as a `[B, C, H, W]` tensor, without
    /// augmentation.
    pub fn eval_batch<T: Real>(&self, indices: &[usize], cfg: &AugmentConfig) -> Result<(Tensor<T>, Vec<usize>)> {
        self.assemble(indices, |i, out| normalize(self.image(i), self.dims, cfg, out))
    }

    /// Augmented images of `indices`; sample `k` of the batch draws from
    /// `sample_rng(stream, indices[k])`.
    pub fn train_batch<T: Real>(
        &self,
        indices: &[usize],
        cfg: &AugmentConfig,
        stream: u64,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        self.assemble(indices, |i, out| {
            let mut rng = sample_rng(stream, i as u64);
            augment(self.image(i), self.dims, cfg, &mut rng, out)
        })
    }

    fn assemble<T: Real>(
        &self,
        indices: &[usize],
        fill: impl Fn(usize, &mut [T]) + Sync,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        use rayon::prelude::*;
        let per = self.dims.iter().product::<usize>();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index { what: "sample", index: bad, limit: self.len() });
        }
        let mut data = vec![T::zero(); indices.len() * per];
        data.par_chunks_mut(per.max(1))
            .zip(indices.par_iter())
            .for_each(|(out, &i)| fill(i, out));
        let [c, h, w] = self.dims;
        let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Independent RNG for one sample within one stream (e.g. one epoch).
pub fn sample_rng(stream: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    rng.set_stream(sample);
    rng
}

/// Index batches covering `0..len` once; the last may be short.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter {}

/// Batches over `dataset`, in a seeded random permutation when `shuffle`.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<BatchIter> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter { order, batch_size, pos: 0 })
}
