//! Supervised training, denoising pretraining and the pieces they share.
//!
//! Every random choice in a run (sample order, patch position, mirror axes,
//! click positions, corruptions) comes from its own stream seeded by
//! `(seed, epoch, sample, stream)`, so switching one of them off leaves the
//! others unchanged.

mod augment;
mod loss;
mod optim;

pub use augment::{
    axes_subsets, dae_corrupt, draw_corruptions, mirror_augment, mirror_axes, AugmentConfig, Corruptions, DaeConfig,
};
pub use loss::{
    dice_ce_loss, downsample_labels, one_hot, smooth_target_row, smooth_targets, LossConfig, LossTargets, LossVars,
};
pub use optim::{poly_lr, Sgd, SgdConfig};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::argmax_volumes;
use crate::metrics::mean_foreground_dice;
use crate::network::{ArchConfig, Model};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::phantom::phantom_seed;
use crate::prompts::{sample_clicks, ClickPrompt};
use crate::schema::LabelSchema;
use crate::tensor::{Element, Tape, Tensor};
use crate::volume::{Image, LabelVolume};

/// Segmentation from the image alone, or with click prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Segmentation,
    Interactive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to one pass over the dataset.
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub task: Task,
    /// Clicks drawn per prompted class.
    pub clicks_per_class: usize,
    /// Classes clicks are drawn from; defaults to the schema's nerve classes.
    pub click_classes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            iterations_per_epoch: None,
            batch_size: 1,
            optimizer: SgdConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            task: Task::Segmentation,
            clicks_per_class: 1,
            click_classes: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("epochs, batch_size and iterations_per_epoch must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.mirror_prob) {
            return Err(Error::Config("mirror_prob must lie in [0, 1]".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Mean foreground Dice of the argmax on the training patches.
    pub mean_dice: Option<f64>,
    pub lr: f64,
}

const STREAM_ORDER: u64 = 1;
const STREAM_PATCH: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_CLICKS: u64 = 4;
const STREAM_CORRUPT: u64 = 5;

fn stream_seed(seed: u64, stream: u64, epoch: usize, sample: usize) -> u64 {
    phantom_seed(phantom_seed(phantom_seed(seed, stream as usize), epoch), sample)
}

fn stream_rng(seed: u64, stream: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, epoch, sample))
}

/// Dataset indices visited in one epoch: concatenated shuffles of `0..n`.
fn epoch_order(seed: u64, epoch: usize, n: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut round = 0;
    while out.len() < len {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream_rng(seed, STREAM_ORDER, epoch, round));
        out.extend(perm);
        round += 1;
    }
    out.truncate(len);
    out
}

/// Stack single-channel images into `[B, 1, H, W, D]`.
pub fn image_batch<F: Element>(images: &[&Image]) -> Result<Tensor<F>> {
    let dims = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dims;
    let mut data = Vec::with_capacity(images.len() * dims.iter().product::<usize>());
    for img in images {
        if img.dims != dims {
            return Err(Error::Shape("batch volumes differ in extents".into()));
        }
        data.extend(img.data.iter().map(|&v| F::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, dims[0], dims[1], dims[2]], data)
}

fn random_patch<R: Rng>(
    img: &Image,
    lab: &LabelVolume,
    patch: [usize; 3],
    rng: &mut R,
) -> Result<(Image, LabelVolume)> {
    if img.dims == patch {
        return Ok((img.clone(), lab.clone()));
    }
    let lo = [0, 1, 2].map(|a| rng.random_range(0..=img.dims[a] - patch[a]));
    Ok((img.crop(lo, patch)?, lab.crop(lo, patch)?))
}

fn check_dataset(data: &[(Image, LabelVolume)], arch: &ArchConfig, schema: &LabelSchema) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if arch.num_classes != schema.num_classes() {
        return Err(Error::Config(format!(
            "network predicts {} classes, schema has {}",
            arch.num_classes,
            schema.num_classes()
        )));
    }
    for (i, (img, lab)) in data.iter().enumerate() {
        img.same_grid(lab).map_err(|e| Error::Validation(format!("case {i}: {e}")))?;
        if (0..3).any(|a| img.dims[a] < arch.patch_extents[a]) {
            return Err(Error::Validation(format!(
                "case {i}: extents {:?} smaller than patch {:?}",
                img.dims, arch.patch_extents
            )));
        }
        if let Some(&l) = lab.data.iter().find(|&&l| l as usize >= schema.num_classes()) {
            return Err(Error::Validation(format!("case {i}: label {l} not in schema")));
        }
    }
    Ok(())
}

/// Loss weights for the full-resolution output followed by each auxiliary
/// output: `2^-i`, normalized to sum to one.
pub fn deep_supervision_weights(n_outputs: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_outputs).map(|i| 0.5f64.powi(i as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

fn collect_grads<F: Element>(tape: &mut Tape<F>, store: &ParamStore<F>, bound: &Bound) -> Vec<(ParamId, Tensor<F>)> {
    store.ids().filter_map(|id| tape.take_grad(bound.var(id)).map(|g| (id, g))).collect()
}

/// Forward, loss, backward and one optimizer update on a prepared batch.
/// Returns the loss and the argmax predictions.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Element>(
    model: &mut Model<F>,
    opt: &mut Sgd<F>,
    images: &[&Image],
    labels: &[&LabelVolume],
    clicks: Option<&[ClickPrompt]>,
    schema: &LabelSchema,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<(f64, Vec<LabelVolume>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let x = tape.constant(image_batch::<F>(images)?);
    let out = model.net.forward(&mut tape, &p, x, clicks)?;
    let targets = LossTargets::<F>::new(labels, schema, loss_cfg)?;
    let mut total = dice_ce_loss(&mut tape, out.logits, &targets, loss_cfg)?.total;
    if !out.aux.is_empty() {
        let w = deep_supervision_weights(out.aux.len() + 1);
        total = tape.mul_scalar(total, F::from_f64_lossy(w[0]));
        let full = labels[0].dims;
        for (i, &a) in out.aux.iter().enumerate() {
            let s = tape.shape(a).to_vec();
            let factor = [0, 1, 2].map(|d| full[d] / s[d + 2]);
            let small: Vec<LabelVolume> = labels.iter().map(|l| downsample_labels(l, factor)).collect();
            let refs: Vec<&LabelVolume> = small.iter().collect();
            let t = LossTargets::<F>::new(&refs, schema, loss_cfg)?;
            let l = dice_ce_loss(&mut tape, a, &t, loss_cfg)?.total;
            let l = tape.mul_scalar(l, F::from_f64_lossy(w[i + 1]));
            total = tape.add(total, l)?;
        }
    }
    let loss = tape.value(total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let preds = argmax_volumes(tape.value(out.logits), labels[0].spacing_mm)?;
    tape.backward(total)?;
    let mut grads = collect_grads(&mut tape, &model.params, &p);
    opt.step(&mut model.params, &mut grads, lr)?;
    Ok((loss, preds))
}

/// Run supervised training. `on_epoch` sees every epoch's metrics as soon as
/// they are known; an error from it stops the run.
pub fn train<F: Element>(
    model: &mut Model<F>,
    data: &[(Image, LabelVolume)],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dataset(data, model.cfg(), schema)?;
    if cfg.task == Task::Interactive && !model.cfg().click_branch {
        return Err(Error::Config("interactive training needs click_branch = true".into()));
    }
    let click_classes = cfg.click_classes.clone().unwrap_or_else(|| schema.nerve_classes());
    if let Some(&c) = click_classes.iter().find(|&&c| c == 0 || c >= schema.num_classes()) {
        return Err(Error::Config(format!("click class {c} is not a foreground class")));
    }
    let patch = model.cfg().patch_extents;
    let k = schema.num_classes();
    let bs = cfg.batch_size;
    let iters = cfg.iterations_per_epoch.unwrap_or(data.len().div_ceil(bs));
    let mut opt = Sgd::new(cfg.optimizer.clone(), model.params.len());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.optimizer.lr, epoch, cfg.epochs, cfg.optimizer.poly_exponent);
        let order = epoch_order(cfg.seed, epoch, data.len(), iters * bs);
        let (mut loss_sum, mut dice_sum, mut dice_n) = (0.0, 0.0, 0usize);
        for it in 0..iters {
            let mut batch = Vec::with_capacity(bs);
            for b in 0..bs {
                let s = it * bs + b;
                let (img, lab) = &data[order[s]];
                let (img, lab) = random_patch(img, lab, patch, &mut stream_rng(cfg.seed, STREAM_PATCH, epoch, s))?;
                let sample = match cfg.augment.draw(&mut stream_rng(cfg.seed, STREAM_AUGMENT, epoch, s)) {
                    Some(axes) => mirror_augment(&img, &lab, &axes, schema)?,
                    None => (img, lab),
                };
                batch.push(sample);
            }
            let clicks = match cfg.task {
                Task::Segmentation => None,
                Task::Interactive => {
                    // clicks are shared by the batch; drawn from its first sample
                    let gt = &batch[0].1;
                    let counts = crate::phantom::class_volumes(gt, k);
                    let present: Vec<usize> =
                        click_classes.iter().copied().filter(|&c| counts[c] >= cfg.clicks_per_class.max(1)).collect();
                    let seed = stream_seed(cfg.seed, STREAM_CLICKS, epoch, it * bs);
                    Some(sample_clicks(gt, &present, cfg.clicks_per_class, seed)?)
                }
            };
            let imgs: Vec<&Image> = batch.iter().map(|b| &b.0).collect();
            let labs: Vec<&LabelVolume> = batch.iter().map(|b| &b.1).collect();
            let (loss, preds) = train_step(model, &mut opt, &imgs, &labs, clicks.as_deref(), schema, &cfg.loss, lr)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "training diverged at epoch {epoch}, iteration {it} (lr {lr:.3e}): {m}"
                    )),
                    e => e,
                })?;
            loss_sum += loss;
            for (p, l) in preds.iter().zip(&labs) {
                dice_sum += mean_foreground_dice(p, l, k)?;
                dice_n += 1;
            }
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / iters as f64,
            mean_dice: (dice_n > 0 && k > 1).then(|| dice_sum / dice_n as f64),
            lr,
        };
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub dae: DaeConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iterations_per_epoch: None,
            batch_size: 1,
            optimizer: SgdConfig::default(),
            dae: DaeConfig::default(),
            seed: 0,
        }
    }
}

/// Architecture of the reconstruction network paired with `arch`: same
/// trunk, one output channel per input channel, no prompts or auxiliary heads.
pub fn dae_arch(arch: &ArchConfig) -> ArchConfig {
    ArchConfig { num_classes: arch.in_channels, click_branch: false, deep_supervision: false, ..arch.clone() }
}

/// Denoising pretraining: reconstruct clean images from corrupted copies
/// under an L1 loss. Reported `loss` is the mean L1 error.
pub fn pretrain_dae<F: Element>(
    model: &mut Model<F>,
    images: &[Image],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.iterations_per_epoch == Some(0) {
        return Err(Error::Config("epochs, batch_size and iterations_per_epoch must be ≥ 1".into()));
    }
    cfg.optimizer.validate()?;
    cfg.dae.validate()?;
    let arch = model.cfg().clone();
    if arch.num_classes != arch.in_channels {
        return Err(Error::Config(format!(
            "reconstruction network must output {} channels, got {}",
            arch.in_channels, arch.num_classes
        )));
    }
    if images.is_empty() {
        return Err(Error::Validation("pretraining set is empty".into()));
    }
    let patch = arch.patch_extents;
    let bs = cfg.batch_size;
    let iters = cfg.iterations_per_epoch.unwrap_or(images.len().div_ceil(bs));
    let mut opt = Sgd::new(cfg.optimizer.clone(), model.params.len());
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.optimizer.lr, epoch, cfg.epochs, cfg.optimizer.poly_exponent);
        let order = epoch_order(cfg.seed, epoch, images.len(), iters * bs);
        let mut loss_sum = 0.0;
        for it in 0..iters {
            let mut clean = Vec::with_capacity(bs);
            let mut noisy = Vec::with_capacity(bs);
            for b in 0..bs {
                let s = it * bs + b;
                let img = &images[order[s]];
                if (0..3).any(|a| img.dims[a] < patch[a]) {
                    return Err(Error::Validation(format!("image {:?} smaller than patch {patch:?}", img.dims)));
                }
                let mut prng = stream_rng(cfg.seed, STREAM_PATCH, epoch, s);
                let lo = [0, 1, 2].map(|a| prng.random_range(0..=img.dims[a] - patch[a]));
                let c = img.crop(lo, patch)?;
                let (n, _) = dae_corrupt(&c, &cfg.dae, &mut stream_rng(cfg.seed, STREAM_CORRUPT, epoch, s));
                clean.push(c);
                noisy.push(n);
            }
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let x = tape.constant(image_batch::<F>(&noisy.iter().collect::<Vec<_>>())?);
            let y = tape.constant(image_batch::<F>(&clean.iter().collect::<Vec<_>>())?);
            let out = model.net.forward(&mut tape, &p, x, None)?;
            let d = tape.sub(out.logits, y)?;
            let a = tape.abs(d);
            let l = tape.mean(a);
            let loss = tape.value(l).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("pretraining diverged at epoch {epoch}, iteration {it}")));
            }
            tape.backward(l)?;
            let mut grads = collect_grads(&mut tape, &model.params, &p);
            opt.step(&mut model.params, &mut grads, lr)?;
            loss_sum += loss;
        }
        let m = EpochMetrics { epoch, loss: loss_sum / iters as f64, mean_dice: None, lr };
        on_epoch(&m)?;
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_covers_dataset() {
        let o = epoch_order(3, 0, 5, 12);
        assert_eq!(o.len(), 12);
        let mut first: Vec<usize> = o[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_ne!(epoch_order(3, 1, 5, 5), epoch_order(3, 0, 5, 5));
    }

    #[test]
    fn ds_weights_halve() {
        let w = deep_supervision_weights(3);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15 && (w[2] - 1.0 / 7.0).abs() < 1e-15);
    }
}
