//! Label smoothing over related classes and the weighted Dice + CE loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::LabelSchema;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Target mass kept on the true class; the rest is split evenly over its
    /// related classes. `None` disables smoothing.
    pub smoothing: Option<f64>,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    /// Apply schema class weights (tiny classes ×10).
    pub class_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { smoothing: Some(0.9), ce_weight: 1.0, dice_weight: 1.0, dice_smooth: 1e-5, class_weights: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.smoothing {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("smoothing must be in (0, 1], got {s}")));
            }
        }
        if self.ce_weight < 0.0 || self.dice_weight < 0.0 || self.dice_smooth < 0.0 {
            return Err(Error::Config("loss term weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self, schema: &LabelSchema) -> Vec<f64> {
        if self.class_weights {
            schema.loss_weights.clone()
        } else {
            vec![1.0; schema.num_classes()]
        }
    }
}

/// Target distribution for one voxel of class `k`.
pub fn smooth_target_row(k: usize, schema: &LabelSchema, keep: Option<f64>) -> Vec<f64> {
    let mut row = vec![0.0; schema.num_classes()];
    let related = schema.related(k);
    match keep {
        Some(keep) if !related.is_empty() => {
            row[k] = keep;
            let share = (1.0 - keep) / related.len() as f64;
            for &r in related {
                row[r] += share;
            }
        }
        _ => row[k] = 1.0,
    }
    row
}

/// Soft targets `[K, H, W, D]` for a class map.
pub fn smooth_targets<F: Element>(labels: &LabelVolume, schema: &LabelSchema, keep: Option<f64>) -> Result<Tensor<F>> {
    let k = schema.num_classes();
    let rows: Vec<Vec<F>> =
        (0..k).map(|c| smooth_target_row(c, schema, keep).into_iter().map(F::from_f64_lossy).collect()).collect();
    let v = labels.len();
    let mut data = vec![F::zero(); k * v];
    for (i, &l) in labels.data.iter().enumerate() {
        let row =
            rows.get(l as usize).ok_or_else(|| Error::Validation(format!("label {l} at voxel {i} not in schema")))?;
        for (c, &t) in row.iter().enumerate() {
            data[c * v + i] = t;
        }
    }
    let [a, b, d] = labels.dims;
    Tensor::new(vec![k, a, b, d], data)
}

/// One-hot `[K, H, W, D]` encoding.
pub fn one_hot<F: Element>(labels: &LabelVolume, k: usize) -> Result<Tensor<F>> {
    let v = labels.len();
    let mut data = vec![F::zero(); k * v];
    for (i, &l) in labels.data.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::Validation(format!("label {l} outside {k} classes")));
        }
        data[l as usize * v + i] = F::one();
    }
    let [a, b, d] = labels.dims;
    Tensor::new(vec![k, a, b, d], data)
}

/// Constant inputs of the loss for one batch.
#[derive(Clone, Debug)]
pub struct LossTargets<F> {
    /// `[B, K, H, W, D]`
    pub soft: Tensor<F>,
    /// `[B, K, H, W, D]`
    pub one_hot: Tensor<F>,
    /// `[B, 1, H, W, D]`: weight of each voxel's true class.
    pub voxel_weights: Tensor<F>,
    pub class_weights: Vec<f64>,
}

impl<F: Element> LossTargets<F> {
    pub fn new(labels: &[&LabelVolume], schema: &LabelSchema, cfg: &LossConfig) -> Result<Self> {
        let k = schema.num_classes();
        let weights = cfg.weights(schema);
        let dims = labels.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dims;
        let mut soft = Vec::new();
        let mut hot = Vec::new();
        let mut vw = Vec::new();
        for l in labels {
            if l.dims != dims {
                return Err(Error::Shape("batch volumes differ in extents".into()));
            }
            soft.extend_from_slice(smooth_targets::<F>(l, schema, cfg.smoothing)?.data());
            hot.extend_from_slice(one_hot::<F>(l, k)?.data());
            vw.extend(l.data.iter().map(|&c| F::from_f64_lossy(weights[c as usize])));
        }
        let b = labels.len();
        let shape = vec![b, k, dims[0], dims[1], dims[2]];
        Ok(Self {
            soft: Tensor::new(shape.clone(), soft)?,
            one_hot: Tensor::new(shape, hot)?,
            voxel_weights: Tensor::new(vec![b, 1, dims[0], dims[1], dims[2]], vw)?,
            class_weights: weights,
        })
    }
}

/// Scalar loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// `ce_w · CE(softmax(logits), soft; voxel weights) + dice_w · (1 − weighted
/// mean soft Dice over foreground classes against one-hot labels)`.
pub fn dice_ce_loss<F: Element>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &LossTargets<F>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let shape = tape.shape(logits).to_vec();
    if shape != targets.soft.shape() {
        return Err(Error::Shape(format!("loss: logits {shape:?} vs targets {:?}", targets.soft.shape())));
    }
    let (b, k) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();

    let logp = tape.log_softmax(logits, 1)?;
    let soft = tape.constant(targets.soft.clone());
    let vw = tape.constant(targets.voxel_weights.clone());
    let tl = tape.mul(soft, logp)?;
    let tl = tape.mul(tl, vw)?;
    let ce = tape.sum(tl);
    let ce = tape.mul_scalar(ce, F::from_f64_lossy(-1.0 / (b * v) as f64));

    let dice = if k > 1 {
        let p = tape.softmax(logits, 1)?;
        let hot = tape.constant(targets.one_hot.clone());
        let inter = tape.mul(p, hot)?;
        let per_class = |tape: &mut Tape<F>, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, k, v])?;
            let x = tape.sum_axis(x, 2, false)?;
            let x = tape.sum_axis(x, 0, false)?;
            tape.narrow(x, 0, 1, k - 1)
        };
        let inter = per_class(tape, inter)?;
        let psum = per_class(tape, p)?;
        let osum = per_class(tape, hot)?;
        let s = F::from_f64_lossy(cfg.dice_smooth);
        let num = tape.mul_scalar(inter, F::from_f64_lossy(2.0));
        let num = tape.add_scalar(num, s);
        let den = tape.add(psum, osum)?;
        let den = tape.add_scalar(den, s);
        let d = tape.div(num, den)?;
        let w = &targets.class_weights[1..];
        let wsum: f64 = w.iter().sum();
        let wt = tape.constant(Tensor::from_f64(vec![k - 1], &w.iter().map(|x| x / wsum).collect::<Vec<_>>())?);
        let d = tape.mul(d, wt)?;
        let mean = tape.sum(d);
        let neg = tape.neg(mean);
        tape.add_scalar(neg, F::one())
    } else {
        tape.constant(Tensor::scalar(F::zero()))
    };

    let a = tape.mul_scalar(ce, F::from_f64_lossy(cfg.ce_weight));
    let c = tape.mul_scalar(dice, F::from_f64_lossy(cfg.dice_weight));
    let total = tape.add(a, c)?;
    Ok(LossVars { total, ce, dice })
}

/// Nearest-neighbour downsampling of a class map by integer factors.
pub fn downsample_labels(labels: &LabelVolume, factor: [usize; 3]) -> LabelVolume {
    let dims = [0, 1, 2].map(|a| labels.dims[a] / factor[a]);
    let mut out = LabelVolume::filled(dims, 0);
    out.spacing_mm = [0, 1, 2].map(|a| labels.spacing_mm[a] * factor[a] as f64);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let idx = out.index(i, j, k);
                out.data[idx] = labels.at([i * factor[0], j * factor[1], k * factor[2]]);
            }
        }
    }
    out
}
