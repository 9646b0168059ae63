//! Connected-component labelling and small-component filtering with
//! per-class volume thresholds learned from ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::LabelSchema;
use crate::volume::{LabelVolume, Volume};

/// Voxel adjacency: faces, faces + edges, or faces + edges + corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[derive(Default)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// All neighbour offsets under this adjacency.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for a in -1isize..=1 {
            for b in -1isize..=1 {
                for c in -1isize..=1 {
                    let l1 = a.abs() + b.abs() + c.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([a, b, c]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub voxel_count: usize,
    /// Inclusive `[min, max]` corner per axis.
    pub bbox: [[usize; 3]; 2],
}

/// Labelled components of one binary mask; label 0 is background.
#[derive(Clone, Debug)]
pub struct Components {
    pub labels: Volume<u32>,
    pub components: Vec<Component>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Label the maximal connected regions of `mask`, numbering them `1..=n` in
/// order of their first voxel in scan order.
pub fn connected_components(mask: &Volume<bool>, conn: Connectivity) -> Components {
    let [d0, d1, d2] = mask.dims;
    let n = mask.len();
    // union-find over voxel indices, restricted to earlier neighbours
    let back: Vec<[isize; 3]> = conn.offsets().into_iter().filter(|o| *o < [0, 0, 0]).collect();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let idx = mask.index(i, j, k);
                if !mask.data[idx] {
                    continue;
                }
                for o in &back {
                    let (ni, nj, nk) = (i as isize + o[0], j as isize + o[1], k as isize + o[2]);
                    if ni < 0 || nj < 0 || nk < 0 || nj >= d1 as isize || nk >= d2 as isize {
                        continue;
                    }
                    let nidx = mask.index(ni as usize, nj as usize, nk as usize);
                    if mask.data[nidx] {
                        let (ra, rb) = (find(&mut parent, idx as u32), find(&mut parent, nidx as u32));
                        if ra != rb {
                            // keep the earliest voxel as root
                            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                            parent[hi as usize] = lo;
                        }
                    }
                }
            }
        }
    }
    let mut root_label = vec![0u32; n];
    let mut labels = Volume { dims: mask.dims, spacing_mm: mask.spacing_mm, data: vec![0u32; n] };
    let mut components: Vec<Component> = Vec::new();
    for idx in 0..n {
        if !mask.data[idx] {
            continue;
        }
        let r = find(&mut parent, idx as u32) as usize;
        if root_label[r] == 0 {
            components.push(Component {
                id: components.len() as u32 + 1,
                voxel_count: 0,
                bbox: [[usize::MAX; 3], [0; 3]],
            });
            root_label[r] = components.len() as u32;
        }
        let l = root_label[r];
        labels.data[idx] = l;
        let comp = &mut components[l as usize - 1];
        comp.voxel_count += 1;
        let c = mask.coord(idx);
        for (a, &ca) in c.iter().enumerate() {
            comp.bbox[0][a] = comp.bbox[0][a].min(ca);
            comp.bbox[1][a] = comp.bbox[1][a].max(ca);
        }
    }
    Components { labels, components }
}

pub fn class_mask(labels: &LabelVolume, class: u8) -> Volume<bool> {
    labels.map(|v| v == class)
}

/// Per-class component summary of a class map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentReport {
    /// Indexed by class id; background is left empty.
    pub classes: Vec<Vec<Component>>,
}

pub fn component_report(labels: &LabelVolume, num_classes: usize, conn: Connectivity) -> ComponentReport {
    let mut classes = vec![Vec::new(); num_classes];
    for (c, slot) in classes.iter_mut().enumerate().skip(1) {
        *slot = connected_components(&class_mask(labels, c as u8), conn).components;
    }
    ComponentReport { classes }
}

/// Minimum component volume per class (voxels). Zero disables filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    pub connectivity: Connectivity,
    pub percentile: f64,
    pub thresholds: Vec<usize>,
}

/// Percentile used for the threshold table.
pub const THRESHOLD_PERCENTILE: f64 = 0.5;

/// Nearest-rank-lower percentile of a sorted sample: element
/// `floor(p/100 · (n−1))`.
pub fn percentile_lower(sorted: &[usize], p: f64) -> usize {
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx]
}

/// Pool ground-truth component volumes per class and take the lower
/// 0.5th percentile. Classes absent from every volume get 0.
pub fn compute_class_thresholds(gts: &[LabelVolume], schema: &LabelSchema, conn: Connectivity) -> ThresholdTable {
    let k = schema.num_classes();
    let mut pooled: Vec<Vec<usize>> = vec![Vec::new(); k];
    for gt in gts {
        let report = component_report(gt, k, conn);
        for (c, comps) in report.classes.iter().enumerate() {
            pooled[c].extend(comps.iter().map(|x| x.voxel_count));
        }
    }
    let thresholds = pooled
        .iter_mut()
        .enumerate()
        .map(|(c, v)| {
            if c == 0 || v.is_empty() {
                return 0;
            }
            v.sort_unstable();
            percentile_lower(v, THRESHOLD_PERCENTILE)
        })
        .collect();
    ThresholdTable { connectivity: conn, percentile: THRESHOLD_PERCENTILE, thresholds }
}

/// Relabel every component smaller than its class threshold as background.
pub fn filter_small_components(pred: &LabelVolume, table: &ThresholdTable) -> Result<LabelVolume> {
    let mut out = pred.clone();
    let max_label = pred.data.iter().copied().max().unwrap_or(0) as usize;
    if max_label >= table.thresholds.len() {
        return Err(Error::Validation(format!(
            "prediction contains class {max_label} but the threshold table covers {} classes",
            table.thresholds.len()
        )));
    }
    for (c, &thr) in table.thresholds.iter().enumerate().skip(1) {
        if thr == 0 {
            continue;
        }
        let cc = connected_components(&class_mask(pred, c as u8), table.connectivity);
        let small: Vec<bool> =
            std::iter::once(false).chain(cc.components.iter().map(|x| x.voxel_count < thr)).collect();
        for (o, &l) in out.data.iter_mut().zip(&cc.labels.data) {
            if l != 0 && small[l as usize] {
                *o = 0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: [usize; 3], on: &[[usize; 3]]) -> Volume<bool> {
        let mut m = Volume::filled(dims, false);
        for c in on {
            let i = m.index(c[0], c[1], c[2]);
            m.data[i] = true;
        }
        m
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert!(Connectivity::try_from(7).is_err());
    }

    #[test]
    fn corner_touching_voxels() {
        let m = mask_with([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::Six).components.len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).components.len(), 2);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).components.len(), 1);
    }

    #[test]
    fn solid_cube_one_component_with_bbox() {
        let mut m = Volume::filled([6, 6, 6], false);
        for i in 1..4 {
            for j in 2..5 {
                for k in 0..2 {
                    let idx = m.index(i, j, k);
                    m.data[idx] = true;
                }
            }
        }
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.components.len(), 1);
        assert_eq!(cc.components[0].voxel_count, 18);
        assert_eq!(cc.components[0].bbox, [[1, 2, 0], [3, 4, 1]]);
    }

    #[test]
    fn labels_follow_scan_order() {
        let m = mask_with([1, 1, 5], &[[0, 0, 0], [0, 0, 2], [0, 0, 3]]);
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.labels.data, vec![1, 0, 2, 2, 0]);
    }

    #[test]
    fn percentile_of_two_hundred() {
        let v: Vec<usize> = (0..200).map(|i| 10 + i * 5).collect();
        assert_eq!(percentile_lower(&v, THRESHOLD_PERCENTILE), 10);
        assert_eq!(percentile_lower(&[42], THRESHOLD_PERCENTILE), 42);
    }
}
