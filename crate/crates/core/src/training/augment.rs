//! Mirror augmentation with laterality-aware label swapping, and the
//! corruptions used for denoising pretraining.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::swap_laterality_labels;
use crate::schema::LabelSchema;
use crate::volume::{Image, LabelVolume, LR_AXIS};

/// The mirrorable axes; the left-right axis only when `allow_lr`.
pub fn mirror_axes(allow_lr: bool) -> Vec<usize> {
    (0..3).filter(|&a| allow_lr || a != LR_AXIS).collect()
}

/// Every non-empty subset of `universe` (duplicates ignored), in a fixed
/// order: by bitmask over the sorted axes.
pub fn axes_subsets(universe: &[usize]) -> Vec<Vec<usize>> {
    let mut axes = universe.to_vec();
    axes.sort_unstable();
    axes.dedup();
    let mut out = Vec::new();
    for mask in 1u32..(1 << axes.len()) {
        out.push(axes.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &a)| a).collect());
    }
    out
}

/// Flip image and labels along `axes`. When the left-right axis is among
/// them, lateral partner labels are exchanged so a left structure stays
/// labelled left after it moves to the other side.
pub fn mirror_augment(
    image: &Image,
    labels: &LabelVolume,
    axes: &[usize],
    schema: &LabelSchema,
) -> Result<(Image, LabelVolume)> {
    image.same_grid(labels)?;
    if let Some(a) = axes.iter().find(|&&a| a > 2) {
        return Err(Error::Validation(format!("mirror axis {a} out of range")));
    }
    let img = image.flip(axes);
    let mut lab = labels.flip(axes);
    if axes.contains(&LR_AXIS) {
        lab = swap_laterality_labels(&lab, schema);
    }
    Ok((img, lab))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mirror_prob: f64,
    pub allow_lr: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, mirror_prob: 0.5, allow_lr: true }
    }
}

impl AugmentConfig {
    /// Draw the axes to mirror for one sample, if any.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<usize>> {
        if !self.enabled || rng.random::<f64>() >= self.mirror_prob {
            return None;
        }
        let subsets = axes_subsets(&mirror_axes(self.allow_lr));
        Some(subsets[rng.random_range(0..subsets.len())].clone())
    }
}

/// Corruption settings for denoising pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaeConfig {
    /// Inclusive range of cuboid masks per sample.
    pub mask_count: [usize; 2],
    /// Inclusive range of mask side lengths in voxels.
    pub mask_size: [usize; 2],
    /// Block size of the average-pool then nearest-upsample degradation.
    pub downsample_factor: usize,
    /// Noise standard deviation relative to the image intensity range.
    pub noise_sigma: f64,
    pub p_mask: f64,
    pub p_downsample: f64,
    pub p_noise: f64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        Self {
            mask_count: [1, 4],
            mask_size: [8, 16],
            downsample_factor: 2,
            noise_sigma: 0.1,
            p_mask: 0.5,
            p_downsample: 0.5,
            p_noise: 0.5,
        }
    }
}

impl DaeConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_mask, self.p_downsample, self.p_noise];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("corruption probabilities must lie in [0, 1]".into()));
        }
        if self.mask_count[0] > self.mask_count[1] || self.mask_size[0] > self.mask_size[1] || self.mask_size[0] == 0 {
            return Err(Error::Config("mask ranges must be non-empty [lo, hi] with lo ≥ 1 for sizes".into()));
        }
        if self.downsample_factor == 0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("downsample factor must be ≥ 1 and noise sigma ≥ 0".into()));
        }
        Ok(())
    }
}

/// Which corruptions were applied to a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Corruptions {
    pub mask: bool,
    pub downsample: bool,
    pub noise: bool,
}

/// Pick corruptions independently by their probabilities; if none fires,
/// one is chosen with probability proportional to its weight (uniformly when
/// all weights are zero).
pub fn draw_corruptions<R: Rng + ?Sized>(cfg: &DaeConfig, rng: &mut R) -> Corruptions {
    let mut c = Corruptions {
        mask: rng.random::<f64>() < cfg.p_mask,
        downsample: rng.random::<f64>() < cfg.p_downsample,
        noise: rng.random::<f64>() < cfg.p_noise,
    };
    if !(c.mask || c.downsample || c.noise) {
        let w = [cfg.p_mask, cfg.p_downsample, cfg.p_noise];
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = 2;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            pick
        } else {
            rng.random_range(0..3)
        };
        match pick {
            0 => c.mask = true,
            1 => c.downsample = true,
            _ => c.noise = true,
        }
    }
    c
}

/// Apply at least one corruption to `image`; the clean image is the target.
pub fn dae_corrupt<R: Rng + ?Sized>(image: &Image, cfg: &DaeConfig, rng: &mut R) -> (Image, Corruptions) {
    let which = draw_corruptions(cfg, rng);
    let mut out = image.clone();
    if which.mask {
        let n = rng.random_range(cfg.mask_count[0]..=cfg.mask_count[1]);
        for _ in 0..n {
            let mut lo = [0; 3];
            let mut hi = [0; 3];
            for a in 0..3 {
                let size = rng.random_range(cfg.mask_size[0]..=cfg.mask_size[1]).min(out.dims[a]);
                lo[a] = rng.random_range(0..=out.dims[a] - size);
                hi[a] = lo[a] + size;
            }
            for i in lo[0]..hi[0] {
                for j in lo[1]..hi[1] {
                    for k in lo[2]..hi[2] {
                        let idx = out.index(i, j, k);
                        out.data[idx] = 0.0;
                    }
                }
            }
        }
    }
    if which.downsample && cfg.downsample_factor > 1 {
        out = block_average(&out, cfg.downsample_factor);
    }
    if which.noise && cfg.noise_sigma > 0.0 {
        let (lo, hi) = image.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = (hi - lo).max(f32::EPSILON) as f64;
        let normal = Normal::new(0.0, cfg.noise_sigma * range).expect("finite sigma");
        for v in &mut out.data {
            *v += normal.sample(rng) as f32;
        }
    }
    (out, which)
}

/// Replace each `f³` block (partial at the far edges) by its mean.
fn block_average(image: &Image, f: usize) -> Image {
    let mut out = image.clone();
    let [d0, d1, d2] = image.dims;
    for bi in (0..d0).step_by(f) {
        for bj in (0..d1).step_by(f) {
            for bk in (0..d2).step_by(f) {
                let (ei, ej, ek) = ((bi + f).min(d0), (bj + f).min(d1), (bk + f).min(d2));
                let mut sum = 0.0f64;
                for i in bi..ei {
                    for j in bj..ej {
                        for k in bk..ek {
                            sum += image.at([i, j, k]) as f64;
                        }
                    }
                }
                let mean = (sum / ((ei - bi) * (ej - bj) * (ek - bk)) as f64) as f32;
                for i in bi..ei {
                    for j in bj..ej {
                        for k in bk..ek {
                            let idx = out.index(i, j, k);
                            out.data[idx] = mean;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subsets() {
        assert_eq!(axes_subsets(&[0, 1, 2]).len(), 7);
        assert!(axes_subsets(&[]).is_empty());
        let no_lr = axes_subsets(&mirror_axes(false));
        assert_eq!(no_lr, vec![vec![0], vec![1], vec![0, 1]]);
    }

    #[test]
    fn at_least_one_corruption() {
        let cfg = DaeConfig { p_mask: 0.0, p_downsample: 0.0, p_noise: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = draw_corruptions(&cfg, &mut rng);
            assert!(c.mask || c.downsample || c.noise);
        }
        let only_noise = DaeConfig { p_mask: 0.0, p_downsample: 0.0, p_noise: 0.3, ..Default::default() };
        for _ in 0..50 {
            assert_eq!(draw_corruptions(&only_noise, &mut rng), Corruptions { noise: true, ..Default::default() });
        }
    }

    #[test]
    fn block_average_preserves_mean() {
        let mut img = Image::filled([5, 4, 4], 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let out = block_average(&img, 2);
        let s0: f64 = img.data.iter().map(|&v| v as f64).sum();
        let s1: f64 = out.data.iter().map(|&v| v as f64).sum();
        assert!((s0 - s1).abs() < 1e-2);
    }
}
