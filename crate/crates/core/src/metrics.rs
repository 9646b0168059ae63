//! Overlap and surface-distance metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// `2|A∩B| / (|A|+|B|)` for one class; 1 when the class is absent from both.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    pred.same_grid(gt)?;
    Ok(dice_masks(&pred.map(|v| v == class), &gt.map(|v| v == class)))
}

pub fn dice_masks(a: &Volume<bool>, b: &Volume<bool>) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// HD95 outcome: a distance, or undefined when exactly one mask is empty.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SurfaceDistance {
    Mm(f64),
    #[serde(with = "undefined_tag")]
    Undefined,
}

mod undefined_tag {
    use serde::{de::Error, Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "undefined" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"undefined\", got {s:?}")))
        }
    }
}

impl Serialize for SurfaceDistance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SurfaceDistance::Mm(v) => s.serialize_f64(*v),
            SurfaceDistance::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl SurfaceDistance {
    pub fn value(self) -> Option<f64> {
        match self {
            SurfaceDistance::Mm(v) => Some(v),
            SurfaceDistance::Undefined => None,
        }
    }
}

/// Foreground voxels with a face neighbour outside the mask or outside the
/// grid.
pub fn boundary(mask: &Volume<bool>) -> Volume<bool> {
    let [d0, d1, d2] = mask.dims;
    let mut out = Volume::filled(mask.dims, false);
    out.spacing_mm = mask.spacing_mm;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let idx = mask.index(i, j, k);
                if !mask.data[idx] {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == d0 || j + 1 == d1 || k + 1 == d2;
                out.data[idx] = edge
                    || !mask.data[mask.index(i - 1, j, k)]
                    || !mask.data[mask.index(i + 1, j, k)]
                    || !mask.data[mask.index(i, j - 1, k)]
                    || !mask.data[mask.index(i, j + 1, k)]
                    || !mask.data[mask.index(i, j, k - 1)]
                    || !mask.data[mask.index(i, j, k + 1)];
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing weight `w = spacing²`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let s = ((fq + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while j + 1 < v.len() && z[j + 1] < qf {
            j += 1;
        }
        let p = v[j];
        let d = qf - p as f64;
        *o = w * d * d + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `true`.
pub fn squared_distance_to(mask: &Volume<bool>, spacing: [f64; 3]) -> Vec<f64> {
    let dims = mask.dims;
    let mut g: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in [2usize, 1, 0] {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for (t, l) in line.iter_mut().enumerate() {
                    *l = g[base + t * strides[axis]];
                }
                edt_1d(&line, w, &mut out, &mut v, &mut z);
                for (t, o) in out.iter().enumerate() {
                    g[base + t * strides[axis]] = *o;
                }
            }
        }
    }
    g
}

/// Linear-interpolation percentile of an ascending sample.
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the pooled directed boundary distances in both
/// directions.
pub fn hd95(pred: &Volume<bool>, gt: &Volume<bool>, spacing: [f64; 3]) -> Result<SurfaceDistance> {
    pred.same_grid(gt)?;
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")));
    }
    let (ea, eb) = (!pred.data.iter().any(|&x| x), !gt.data.iter().any(|&x| x));
    match (ea, eb) {
        (true, true) => return Ok(SurfaceDistance::Mm(0.0)),
        (true, false) | (false, true) => return Ok(SurfaceDistance::Undefined),
        _ => {}
    }
    let (ba, bb) = (boundary(pred), boundary(gt));
    let (da, db) = (squared_distance_to(&ba, spacing), squared_distance_to(&bb, spacing));
    let mut pooled: Vec<f64> = Vec::new();
    for i in 0..ba.len() {
        if ba.data[i] {
            pooled.push(db[i].sqrt());
        }
        if bb.data[i] {
            pooled.push(da[i].sqrt());
        }
    }
    pooled.sort_by(f64::total_cmp);
    Ok(SurfaceDistance::Mm(percentile_linear(&pooled, 95.0)))
}

/// Per-class and mean scores of one prediction against ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub dice: f64,
    pub hd95: SurfaceDistance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<ClassScore>,
    pub mean_dice: f64,
    /// Mean over classes with a defined HD95.
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

/// Score every foreground class `1..K`.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<EvaluationReport> {
    pred.same_grid(gt)?;
    let mut classes = Vec::new();
    for c in 1..num_classes {
        let (a, b) = (pred.map(|v| v as usize == c), gt.map(|v| v as usize == c));
        classes.push(ClassScore { class: c, dice: dice_masks(&a, &b), hd95: hd95(&a, &b, gt.spacing_mm)? });
    }
    Ok(summarize(classes))
}

/// Combine class scores (possibly pooled over several cases) into means.
pub fn summarize(classes: Vec<ClassScore>) -> EvaluationReport {
    let mean_dice = classes.iter().map(|c| c.dice).sum::<f64>() / classes.len().max(1) as f64;
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.hd95.value()).collect();
    let mean_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    EvaluationReport { hd95_undefined: classes.len() - defined.len(), classes, mean_dice, mean_hd95 }
}

/// Mean foreground Dice over classes `1..K`.
pub fn mean_foreground_dice(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<f64> {
    pred.same_grid(gt)?;
    let mut total = 0.0;
    for c in 1..num_classes {
        total += dice(pred, gt, c as u8)?;
    }
    Ok(total / (num_classes - 1) as f64)
}
