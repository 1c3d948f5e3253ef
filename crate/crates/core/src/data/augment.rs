use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ChannelStats;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub hflip_prob: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AugmentConfig {
    /// Crop padding 4, flip probability 0.5, normalization by `stats`.
    pub fn standard(stats: &ChannelStats) -> Self {
        AugmentConfig {
            crop_pad: 4,
            hflip_prob: 0.5,
            mean: stats.mean.clone(),
            std: stats.std.clone(),
        }
    }

    /// Normalization only.
    pub fn identity(stats: &ChannelStats) -> Self {
        AugmentConfig {
            crop_pad: 0,
            hflip_prob: 0.0,
            ..Self::standard(stats)
        }
    }
}

/// Maps an index of the padded axis back into `0..n` by mirroring at the
/// edges, without repeating the edge pixel.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Mirrors every row of a `[C, H, W]` image.
pub fn hflip(image: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let w = dims[2];
    image
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Scales to `[0, 1]` and applies per-channel `(x − mean) / std`.
pub fn normalize<T: Real>(image: &[u8], dims: [usize; 3], cfg: &AugmentConfig, out: &mut [T]) {
    augment_with(image, dims, cfg, (cfg.crop_pad, cfg.crop_pad), false, out);
}

/// Deterministic core of [`augment`]: crop the reflection-padded image at
/// offset `(dy, dx)` in `0..=2·crop_pad`, optionally mirror, then normalize.
pub fn augment_with<T: Real>(
    image: &[u8],
    dims: [usize; 3],
    cfg: &AugmentConfig,
    offset: (usize, usize),
    flip: bool,
    out: &mut [T],
) {
    let [c, h, w] = dims;
    let pad = cfg.crop_pad as isize;
    let (dy, dx) = (offset.0 as isize - pad, offset.1 as isize - pad);
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let (m, s) = (cfg.mean[ch], cfg.std[ch]);
        for y in 0..h {
            let sy = reflect_index(y as isize + dy, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect_index(xx as isize + dx, w);
                let v = plane[sy * w + sx] as f64 / 255.0;
                out[(ch * h + y) * w + x] = T::of((v - m) / s);
            }
        }
    }
}

/// Random reflection-padded crop, random horizontal flip, normalization.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &[u8],
    dims: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut R,
    out: &mut [T],
) {
    let span = 2 * cfg.crop_pad;
    let offset = (rng.random_range(0..=span), rng.random_range(0..=span));
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob.min(1.0));
    augment_with(image, dims, cfg, offset, flip, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(pad: usize, flip: f64) -> AugmentConfig {
        AugmentConfig { crop_pad: pad, hflip_prob: flip, mean: vec![0.5; 3], std: vec![0.25; 3] }
    }

    fn image() -> Vec<u8> {
        (0..3 * 5 * 6).map(|v| (v * 7 % 256) as u8).collect()
    }

    #[test]
    fn reflection() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn centered_crop_is_normalization() {
        let img = image();
        let dims = [3, 5, 6];
        let mut a = vec![0f64; img.len()];
        let mut b = vec![0f64; img.len()];
        augment_with(&img, dims, &cfg(4, 0.0), (4, 4), false, &mut a);
        for (o, &p) in b.iter_mut().zip(&img) {
            *o = (p as f64 / 255.0 - 0.5) / 0.25;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn double_flip_is_identity() {
        let dims = [3, 5, 6];
        assert_eq!(hflip(&hflip(&image(), dims), dims), image());
        let mut once = vec![0f64; 90];
        let mut want = vec![0f64; 90];
        augment_with(&image(), dims, &cfg(0, 0.0), (0, 0), true, &mut once);
        normalize(&hflip(&image(), dims), dims, &cfg(0, 0.0), &mut want);
        assert_eq!(once, want);
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut out = vec![0f32; 90];
            for _ in 0..5 {
                augment(&image(), [3, 5, 6], &cfg(2, 0.5), &mut rng, &mut out);
            }
            out
        };
        assert_eq!(run(), run());
    }
}
