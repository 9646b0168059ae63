//! Gaussian-weighted sliding-window prediction and mirror test-time
//! augmentation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::prompts::ClickPrompt;
use crate::schema::LabelSchema;
use crate::tensor::{Element, Tensor};
use crate::training::{axes_subsets, image_batch, mirror_axes};
use crate::volume::{Image, LabelVolume, LR_AXIS};

/// Class probabilities over a grid, `data[c * V + voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub num_classes: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    /// Per-voxel argmax; ties go to the lower class id.
    pub fn argmax(&self) -> LabelVolume {
        let v = self.voxels();
        let mut out = LabelVolume::filled(self.dims, 0);
        out.spacing_mm = self.spacing_mm;
        for i in 0..v {
            let mut best = 0;
            let mut bv = self.data[i];
            for c in 1..self.num_classes {
                let x = self.data[c * v + i];
                if x > bv {
                    bv = x;
                    best = c;
                }
            }
            out.data[i] = best as u8;
        }
        out
    }

    /// Reverse voxel order along `axes` in every channel.
    pub fn flip(&self, axes: &[usize]) -> Self {
        let v = self.voxels();
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.num_classes {
            let vol =
                Image { dims: self.dims, spacing_mm: self.spacing_mm, data: self.data[c * v..(c + 1) * v].to_vec() };
            data.extend(vol.flip(axes).data);
        }
        Self { data, ..self.clone() }
    }
}

/// Argmax over axis 1 of a `[B, K, H, W, D]` tensor.
pub fn argmax_volumes<F: Element>(t: &Tensor<F>, spacing_mm: [f64; 3]) -> Result<Vec<LabelVolume>> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("argmax expects [B, K, H, W, D], got {s:?}")));
    }
    let (b, k) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    let d = t.data();
    Ok((0..b)
        .map(|bi| {
            let data: Vec<f32> = d[bi * k * v..(bi + 1) * k * v].iter().map(|x| x.as_f64() as f32).collect();
            ProbMap { num_classes: k, dims: [s[2], s[3], s[4]], spacing_mm, data }.argmax()
        })
        .collect())
}

/// Exchange the channels of every laterality pair.
pub fn swap_laterality_channels(p: &ProbMap, schema: &LabelSchema) -> Result<ProbMap> {
    if p.num_classes != schema.num_classes() {
        return Err(Error::Shape(format!("{} channels vs {} schema classes", p.num_classes, schema.num_classes())));
    }
    let v = p.voxels();
    let perm = schema.laterality_permutation();
    let mut data = vec![0.0; p.data.len()];
    for c in 0..p.num_classes {
        data[perm[c] * v..(perm[c] + 1) * v].copy_from_slice(p.channel(c));
    }
    Ok(ProbMap { data, ..p.clone() })
}

/// Anything that maps an image patch (plus clicks in patch coordinates) to
/// class probabilities over that patch.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn patch_extents(&self) -> [usize; 3];
    /// Probabilities laid out `[K, patch voxels]`.
    fn predict_patch(&self, patch: &Image, clicks: &[ClickPrompt]) -> Result<Vec<f32>>;
}

impl<F: Element> Predictor for Model<F> {
    fn num_classes(&self) -> usize {
        self.cfg().num_classes
    }

    fn patch_extents(&self) -> [usize; 3] {
        self.cfg().patch_extents
    }

    fn predict_patch(&self, patch: &Image, clicks: &[ClickPrompt]) -> Result<Vec<f32>> {
        let x = image_batch::<F>(&[patch])?;
        let clicks = if self.cfg().click_branch {
            Some(clicks)
        } else if clicks.is_empty() {
            None
        } else {
            return Err(Error::Config("clicks given but the network has no click branch".into()));
        };
        let p = self.probabilities(&x, clicks)?;
        Ok(p.data().iter().map(|v| v.as_f64() as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    /// Window step as a fraction of the patch extent.
    pub step_fraction: f64,
    /// Gaussian importance weighting; uniform when false.
    pub gaussian: bool,
    /// Gaussian sigma as a fraction of the patch extent.
    pub sigma_scale: f64,
    /// Worker threads for windows; 0 uses the global pool.
    pub threads: usize,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self { step_fraction: 0.5, gaussian: true, sigma_scale: 0.125, threads: 1 }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::Config(format!("step_fraction must be in (0, 1], got {}", self.step_fraction)));
        }
        if self.sigma_scale.is_nan() || self.sigma_scale <= 0.0 {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Window starts along one axis: the fewest evenly spaced windows whose
/// step does not exceed `step_fraction · patch`, first at 0 and last flush
/// with the end.
pub fn window_starts(size: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if size <= patch {
        return vec![0];
    }
    let target = patch as f64 * step_fraction;
    let n = ((size - patch) as f64 / target).ceil() as usize + 1;
    let actual = (size - patch) as f64 / (n - 1) as f64;
    (0..n).map(|i| (actual * i as f64).round() as usize).collect()
}

/// Every window origin, in C order over the three axes.
pub fn window_positions(dims: [usize; 3], patch: [usize; 3], step_fraction: f64) -> Vec<[usize; 3]> {
    let s = [0, 1, 2].map(|a| window_starts(dims[a], patch[a], step_fraction));
    let mut out = Vec::with_capacity(s[0].len() * s[1].len() * s[2].len());
    for &i in &s[0] {
        for &j in &s[1] {
            for &k in &s[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Separable Gaussian centred on the patch centre with per-axis sigma
/// `sigma_scale · extent`, scaled so the peak is 1.
pub fn gaussian_importance(patch: [usize; 3], sigma_scale: f64) -> Vec<f32> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = sigma_scale * n as f64;
        (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp()).collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let peak = a.iter().cloned().fold(0.0, f64::max)
        * b.iter().cloned().fold(0.0, f64::max)
        * c.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(patch.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                out.push((x * y * z / peak) as f32);
            }
        }
    }
    out
}

/// Zero-pad `image` so every axis is at least `min`; returns the padded
/// image and the offset of the original inside it.
fn pad_to(image: &Image, min: [usize; 3]) -> (Image, [usize; 3]) {
    if (0..3).all(|a| image.dims[a] >= min[a]) {
        return (image.clone(), [0; 3]);
    }
    let dims = [0, 1, 2].map(|a| image.dims[a].max(min[a]));
    let off = [0, 1, 2].map(|a| (dims[a] - image.dims[a]) / 2);
    let mut out = Image::filled(dims, 0.0);
    out.spacing_mm = image.spacing_mm;
    for i in 0..image.dims[0] {
        for j in 0..image.dims[1] {
            let s = image.index(i, j, 0);
            let d = out.index(i + off[0], j + off[1], off[2]);
            out.data[d..d + image.dims[2]].copy_from_slice(&image.data[s..s + image.dims[2]]);
        }
    }
    (out, off)
}

fn in_window(c: &ClickPrompt, lo: [usize; 3], size: [usize; 3]) -> Option<ClickPrompt> {
    let p = c.coord();
    (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + size[a]).then(|| ClickPrompt {
        x: p[0] - lo[0],
        y: p[1] - lo[1],
        z: p[2] - lo[2],
        class_id: c.class_id,
    })
}

/// Predict a whole image by blending overlapping windows. Each window sees
/// the clicks that fall inside it. Windows may run on several threads; they
/// are accumulated in a fixed order so the result does not depend on the
/// thread count.
pub fn sliding_window_predict<P: Predictor + ?Sized>(
    predictor: &P,
    image: &Image,
    clicks: &[ClickPrompt],
    cfg: &SlidingWindowConfig,
) -> Result<ProbMap> {
    cfg.validate()?;
    let k = predictor.num_classes();
    for c in clicks {
        c.validate(image.dims, k)?;
    }
    let patch = predictor.patch_extents();
    let (padded, off) = pad_to(image, patch);
    let clicks: Vec<ClickPrompt> = clicks
        .iter()
        .map(|c| ClickPrompt { x: c.x + off[0], y: c.y + off[1], z: c.z + off[2], class_id: c.class_id })
        .collect();
    let positions = window_positions(padded.dims, patch, cfg.step_fraction);
    let weight =
        if cfg.gaussian { gaussian_importance(patch, cfg.sigma_scale) } else { vec![1.0; patch.iter().product()] };

    let run = |lo: &[usize; 3]| -> Result<Vec<f32>> {
        let tile = padded.crop(*lo, patch)?;
        let local: Vec<ClickPrompt> = clicks.iter().filter_map(|c| in_window(c, *lo, patch)).collect();
        let p = predictor.predict_patch(&tile, &local)?;
        if p.len() != k * weight.len() {
            return Err(Error::Shape(format!("predictor returned {} values, expected {}", p.len(), k * weight.len())));
        }
        Ok(p)
    };
    let tiles: Vec<Vec<f32>> = if cfg.threads == 1 {
        positions.iter().map(run).collect::<Result<_>>()?
    } else {
        let exec = || positions.par_iter().map(run).collect::<Result<Vec<_>>>();
        if cfg.threads == 0 {
            exec()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(exec)?
        }
    };

    let v: usize = padded.dims.iter().product();
    let pv = weight.len();
    let mut acc = vec![0.0f32; k * v];
    let mut wsum = vec![0.0f32; v];
    for (lo, tile) in positions.iter().zip(&tiles) {
        for i in 0..patch[0] {
            for j in 0..patch[1] {
                let src = (i * patch[1] + j) * patch[2];
                let dst = padded.index(lo[0] + i, lo[1] + j, lo[2]);
                for z in 0..patch[2] {
                    wsum[dst + z] += weight[src + z];
                }
                for c in 0..k {
                    let t = &tile[c * pv + src..c * pv + src + patch[2]];
                    let a = &mut acc[c * v + dst..c * v + dst + patch[2]];
                    for ((a, &t), &w) in a.iter_mut().zip(t).zip(&weight[src..src + patch[2]]) {
                        *a += t * w;
                    }
                }
            }
        }
    }
    for c in 0..k {
        for (a, &w) in acc[c * v..(c + 1) * v].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }

    // crop the padding away
    let full = ProbMap { num_classes: k, dims: padded.dims, spacing_mm: image.spacing_mm, data: acc };
    if padded.dims == image.dims {
        return Ok(full);
    }
    let mut data = Vec::with_capacity(k * image.len());
    for c in 0..k {
        let vol = Image { dims: padded.dims, spacing_mm: image.spacing_mm, data: full.channel(c).to_vec() };
        data.extend(vol.crop(off, image.dims)?.data);
    }
    Ok(ProbMap { num_classes: k, dims: image.dims, spacing_mm: image.spacing_mm, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub enabled: bool,
    /// Include mirrors across the left-right axis.
    pub allow_lr: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { enabled: true, allow_lr: true }
    }
}

impl TtaConfig {
    /// Flip sets evaluated: identity first, then every mirror subset.
    pub fn passes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        if self.enabled {
            out.extend(axes_subsets(&mirror_axes(self.allow_lr)));
        }
        out
    }
}

/// Wall-clock breakdown of one prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub passes: usize,
    pub windows_per_pass: usize,
    pub seconds: f64,
    pub seconds_per_pass: Vec<f64>,
}

/// Average the sliding-window probabilities over every mirror pass. Each
/// pass flips the image and clicks, predicts, flips the probabilities back
/// and, for passes through the left-right axis, swaps partner channels so
/// each channel again refers to the original side.
pub fn tta_predict<P: Predictor + ?Sized>(
    predictor: &P,
    image: &Image,
    clicks: &[ClickPrompt],
    schema: &LabelSchema,
    sw: &SlidingWindowConfig,
    tta: &TtaConfig,
) -> Result<(ProbMap, InferenceReport)> {
    if predictor.num_classes() != schema.num_classes() {
        return Err(Error::Config(format!(
            "predictor has {} classes, schema {}",
            predictor.num_classes(),
            schema.num_classes()
        )));
    }
    let start = Instant::now();
    let passes = tta.passes();
    let mut sum: Option<Vec<f32>> = None;
    let mut per_pass = Vec::with_capacity(passes.len());
    let mut template = None;
    for axes in &passes {
        let t = Instant::now();
        let img = image.flip(axes);
        let cl: Vec<ClickPrompt> = clicks.iter().map(|c| c.mirrored(axes, image.dims, schema)).collect();
        let mut p = sliding_window_predict(predictor, &img, &cl, sw)?.flip(axes);
        if axes.contains(&LR_AXIS) {
            p = swap_laterality_channels(&p, schema)?;
        }
        match &mut sum {
            None => sum = Some(p.data.clone()),
            Some(s) => s.iter_mut().zip(&p.data).for_each(|(a, b)| *a += b),
        }
        template.get_or_insert(p);
        per_pass.push(t.elapsed().as_secs_f64());
    }
    let n = passes.len() as f32;
    let data: Vec<f32> = sum.expect("at least one pass").into_iter().map(|v| v / n).collect();
    let probs = ProbMap { data, ..template.expect("at least one pass") };
    let patch = predictor.patch_extents();
    let padded = [0, 1, 2].map(|a| image.dims[a].max(patch[a]));
    let report = InferenceReport {
        passes: passes.len(),
        windows_per_pass: window_positions(padded, patch, sw.step_fraction).len(),
        seconds: start.elapsed().as_secs_f64(),
        seconds_per_pass: per_pass,
    };
    Ok((probs, report))
}
