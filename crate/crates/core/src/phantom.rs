//! Procedural dental phantoms: a jaw arc with mirror-placed teeth, nerve
//! canals and small midline structures, drawn into `[SI, AP, LR]` grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice_masks;
use crate::schema::LabelSchema;
use crate::volume::{Image, LabelVolume, Volume, LR_AXIS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    /// Incisor, canine and molar pairs are drawn in that order.
    pub tooth_pairs: usize,
    /// Inferior alveolar canal radius at 32 voxels per axis.
    pub nerve_radius: f64,
    /// Size multiplier of the tiny structures.
    pub tiny_scale: f64,
    pub noise_sigma: f64,
    /// Placement jitter in voxels (left and right jitter independently).
    pub jitter: f64,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extents: [32, 32, 32],
            tooth_pairs: 3,
            nerve_radius: 1.4,
            tiny_scale: 1.0,
            noise_sigma: 0.05,
            jitter: 0.4,
            spacing_mm: [1.0; 3],
            seed: 0,
        }
    }
}

const TOOTH_KINDS: [&str; 3] = ["incisor", "canine", "molar"];
pub const MIN_EXTENT: usize = 32;

const BONE: f32 = 0.5;
const TOOTH: f32 = 1.0;
const CANAL: f32 = 0.15;

/// Geometry in units of a 32-voxel reference grid.
struct Frame {
    e: [f64; 3],
}

impl Frame {
    fn sc(&self, axis: usize) -> f64 {
        self.e[axis] / 32.0
    }
    fn mid_lr(&self) -> f64 {
        (self.e[LR_AXIS] - 1.0) / 2.0
    }
    /// AP position of the arch at lateral offset `d` (reference units).
    fn arch_ap(&self, d: f64) -> f64 {
        7.0 + 0.118 * d * d
    }
    /// Reference → voxel coordinates; `d` is the signed lateral offset.
    fn place(&self, si: f64, ap: f64, d: f64) -> [f64; 3] {
        [si * self.sc(0), ap * self.sc(1), self.mid_lr() + d * self.sc(2)]
    }
}

struct Canvas<'a> {
    image: &'a mut Image,
    labels: &'a mut LabelVolume,
}

impl Canvas<'_> {
    /// Paint voxels whose centre satisfies `inside`, within a bounding box.
    fn paint(&mut self, lo: [f64; 3], hi: [f64; 3], value: f32, label: Option<u8>, inside: impl Fn([f64; 3]) -> bool) {
        let dims = self.image.dims;
        let rng = |a: usize| {
            let l = lo[a].floor().max(0.0) as usize;
            let h = (hi[a].ceil().max(0.0) as usize).min(dims[a] - 1);
            l..=h
        };
        for i in rng(0) {
            for j in rng(1) {
                for k in rng(2) {
                    if inside([i as f64, j as f64, k as f64]) {
                        let idx = self.image.index(i, j, k);
                        self.image.data[idx] = value;
                        if let Some(l) = label {
                            self.labels.data[idx] = l;
                        }
                    }
                }
            }
        }
    }

    fn ellipsoid(&mut self, c: [f64; 3], r: [f64; 3], value: f32, label: Option<u8>) {
        let lo = [c[0] - r[0], c[1] - r[1], c[2] - r[2]];
        let hi = [c[0] + r[0], c[1] + r[1], c[2] + r[2]];
        self.paint(lo, hi, value, label, |p| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0);
    }

    /// Tube of radius `r` around the polyline through `pts`.
    fn tube(&mut self, pts: &[[f64; 3]], r: f64, value: f32, label: Option<u8>) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] - r);
                hi[a] = hi[a].max(p[a] + r);
            }
        }
        self.paint(lo, hi, value, label, |p| pts.windows(2).any(|s| segment_distance2(p, s[0], s[1]) <= r * r));
    }
}

fn segment_distance2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: Vec<f64> = (0..3).map(|i| b[i] - a[i]).collect();
    let ap: Vec<f64> = (0..3).map(|i| p[i] - a[i]).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t =
        if len2 == 0.0 { 0.0 } else { (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

fn class_id(schema: &LabelSchema, name: &str) -> Result<u8> {
    schema
        .class_by_name(name)
        .map(|c| c as u8)
        .ok_or_else(|| Error::Validation(format!("schema has no class named {name:?} required by the phantom")))
}

/// Draw one phantom. Pure function of `(cfg, schema)`.
pub fn generate_phantom(cfg: &PhantomConfig, schema: &LabelSchema) -> Result<(Image, LabelVolume)> {
    if cfg.extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::Validation(format!(
            "phantom extents {:?} too small: every axis needs at least {MIN_EXTENT} voxels",
            cfg.extents
        )));
    }
    if !(1..=TOOTH_KINDS.len()).contains(&cfg.tooth_pairs) {
        return Err(Error::Config(format!("tooth_pairs must be 1..=3, got {}", cfg.tooth_pairs)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame = Frame { e: cfg.extents.map(|v| v as f64) };
    let mut image = Volume::filled(cfg.extents, 0.0f32);
    image.spacing_mm = cfg.spacing_mm;
    let mut labels = Volume::filled(cfg.extents, 0u8);
    labels.spacing_mm = cfg.spacing_mm;
    let mut canvas = Canvas { image: &mut image, labels: &mut labels };
    let jit = |rng: &mut ChaCha8Rng| rng.random_range(-cfg.jitter..=cfg.jitter);
    let shift = [jit(&mut rng), jit(&mut rng)];

    // mandible: thick arc in the lower half
    let arch: Vec<[f64; 3]> = (-26..=26).map(|s| s as f64 * 0.5).map(|d| [0.0, frame.arch_ap(d), d]).collect();
    for si in [17.0, 21.0, 25.0] {
        let pts: Vec<[f64; 3]> = arch.iter().map(|p| frame.place(si + shift[0], p[1] + shift[1], p[2])).collect();
        canvas.tube(&pts, 3.2 * frame.sc(1), BONE, None);
    }
    // maxillary bone under the upper teeth
    let pts: Vec<[f64; 3]> = arch.iter().map(|p| frame.place(9.0 + shift[0], p[1] + shift[1], p[2])).collect();
    canvas.tube(&pts, 3.0 * frame.sc(1), BONE, None);

    // teeth: (lateral offset, radii [SI, AP, LR]) in reference units
    let teeth = [(2.4, [3.5, 2.2, 2.0]), (6.8, [4.0, 2.6, 2.2]), (11.6, [5.6, 5.4, 3.8])];
    for (kind, (d, r)) in TOOTH_KINDS.iter().zip(teeth).take(cfg.tooth_pairs) {
        for (side, sign) in [("left", -1.0), ("right", 1.0)] {
            let id = class_id(schema, &format!("upper_{side}_{kind}"))?;
            let dd = sign * d + jit(&mut rng);
            let c = frame.place(9.0 + shift[0] + jit(&mut rng), frame.arch_ap(sign * d) + shift[1], dd);
            let rr = [r[0] * frame.sc(0), r[1] * frame.sc(1), r[2] * frame.sc(2)];
            canvas.ellipsoid(c, rr, TOOTH, Some(id));
        }
    }

    // canals inside the mandible
    let nerve_si = 21.0 + shift[0];
    for (side, sign) in [("left", -1.0), ("right", 1.0)] {
        let ian = class_id(schema, &format!("{side}_inferior_alveolar_nerve"))?;
        let inc = class_id(schema, &format!("{side}_incisive_nerve"))?;
        let j = jit(&mut rng);
        let pts: Vec<[f64; 3]> = (0..=14)
            .map(|s| 6.2 + s as f64 * 0.5)
            .map(|d| frame.place(nerve_si + j, frame.arch_ap(d) + shift[1], sign * d))
            .collect();
        canvas.tube(&pts, cfg.nerve_radius * frame.sc(1), CANAL, Some(ian));
        let a = frame.place(nerve_si + j, frame.arch_ap(4.4) + shift[1], sign * 4.4);
        let b = frame.place(nerve_si + j, frame.arch_ap(2.6) + shift[1], sign * 2.6);
        canvas.tube(&[a, b], 0.7 * cfg.tiny_scale * frame.sc(1), CANAL, Some(inc));
    }
    let lf = class_id(schema, "lingual_foramen")?;
    let c = frame.place(nerve_si + 0.5, frame.arch_ap(0.0) + 2.0 + shift[1], 0.0);
    let r = 1.0 * cfg.tiny_scale;
    canvas.ellipsoid(c, [r * frame.sc(0), r * frame.sc(1), 0.8 * r * frame.sc(2)], CANAL, Some(lf));

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.data.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }

    let k = schema.num_classes();
    let mut present = vec![false; k];
    for &l in &labels.data {
        let l = l as usize;
        if l >= k {
            return Err(Error::Validation(format!("phantom produced label {l} outside the schema")));
        }
        present[l] = true;
    }
    if let Some(missing) = (1..k).find(|&c| !present[c]) {
        return Err(Error::Validation(format!(
            "phantom does not contain class {missing} ({}); extents too small or tooth_pairs too low",
            schema.classes[missing].name
        )));
    }
    Ok((image, labels))
}

/// Seed of the `i`-th phantom in a dataset drawn from `base`.
pub fn phantom_seed(base: u64, i: usize) -> u64 {
    // splitmix64 step keeps neighbouring seeds decorrelated
    let mut z = base.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(cfg: &PhantomConfig, schema: &LabelSchema, count: usize) -> Result<Vec<(Image, LabelVolume)>> {
    (0..count)
        .map(|i| generate_phantom(&PhantomConfig { seed: phantom_seed(cfg.seed, i), ..cfg.clone() }, schema))
        .collect()
}

/// Exchange every class id with its laterality partner.
pub fn swap_laterality_labels(labels: &LabelVolume, schema: &LabelSchema) -> LabelVolume {
    let perm = schema.laterality_permutation();
    labels.map(|l| perm.get(l as usize).map_or(l, |&p| p as u8))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// `None` when the schema has no laterality pairs.
    pub dice: Option<f64>,
    pub per_class: Vec<(usize, f64)>,
    pub notice: Option<String>,
}

/// Dice between the labels and their left/right mirror with partner ids
/// swapped, averaged over the foreground classes present.
pub fn mirror_consistency_check(labels: &LabelVolume, schema: &LabelSchema) -> SymmetryReport {
    if !schema.has_partners() {
        return SymmetryReport {
            dice: None,
            per_class: Vec::new(),
            notice: Some("schema defines no laterality partners; symmetry check skipped".into()),
        };
    }
    let mirrored = swap_laterality_labels(&labels.flip(&[LR_AXIS]), schema);
    let mut per_class = Vec::new();
    for c in 1..schema.num_classes() {
        let (a, b) = (labels.map(|v| v as usize == c), mirrored.map(|v| v as usize == c));
        if a.data.iter().any(|&x| x) || b.data.iter().any(|&x| x) {
            per_class.push((c, dice_masks(&a, &b)));
        }
    }
    let dice = per_class.iter().map(|x| x.1).sum::<f64>() / per_class.len().max(1) as f64;
    SymmetryReport { dice: Some(dice), per_class, notice: None }
}

/// Voxel count per class id.
pub fn class_volumes(labels: &LabelVolume, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &l in &labels.data {
        if (l as usize) < num_classes {
            counts[l as usize] += 1;
        }
    }
    counts
}
