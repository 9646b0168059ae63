//! 3D voxel grids and the raw + JSON sidecar file format.
//!
//! A volume `name` is stored as `name.raw` (little-endian voxels, C order
//! over `[SI, AP, LR]`) next to `name.json`:
//!
//! ```json
//! {"dims":[32,32,32],"spacing_mm":[1.0,1.0,1.0],"dtype":"f32",
//!  "axis_labels":["SI","AP","LR"],"format_version":1}
//! ```

use std::fmt::Debug;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_FORMAT_VERSION: u32 = 1;
pub const AXIS_LABELS: [&str; 3] = ["SI", "AP", "LR"];
/// Axis index of the left/right direction.
pub const LR_AXIS: usize = 2;

/// Scalar types a volume file may hold.
pub trait Voxel: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

macro_rules! voxel {
    ($t:ty, $name:literal) => {
        impl Voxel for $t {
            const DTYPE: &'static str = $name;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk size"))
            }
        }
    };
}

voxel!(f32, "f32");
voxel!(u8, "u8");
voxel!(u16, "u16");

/// Dense 3D grid in C order over `[SI, AP, LR]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<T>,
}

/// Intensity image.
pub type Image = Volume<f32>;
/// Integer class map.
pub type LabelVolume = Volume<u8>;

impl<T: Copy + Default> Volume<T> {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!("volume {dims:?} needs {n} voxels, got {}", data.len())));
        }
        Ok(Self { dims, spacing_mm, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, spacing_mm: [1.0; 3], data: vec![value; dims.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        [idx / (self.dims[1] * self.dims[2]), j, k]
    }

    #[inline]
    pub fn at(&self, c: [usize; 3]) -> T {
        self.data[self.index(c[0], c[1], c[2])]
    }

    pub fn same_grid<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("extent mismatch: {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// Reverse voxel order along each listed axis.
    pub fn flip(&self, axes: &[usize]) -> Self {
        if axes.is_empty() {
            return self.clone();
        }
        let [d0, d1, d2] = self.dims;
        let f = |a: usize, n: usize, i: usize| if axes.contains(&a) { n - 1 - i } else { i };
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    data.push(self.data[self.index(f(0, d0, i), f(1, d1, j), f(2, d2, k))]);
                }
            }
        }
        Self { dims: self.dims, spacing_mm: self.spacing_mm, data }
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { dims: self.dims, spacing_mm: self.spacing_mm, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sub-box `[lo, lo + size)`.
    pub fn crop(&self, lo: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] + size[a] > self.dims[a]) {
            return Err(Error::Shape(format!("crop {lo:?}+{size:?} exceeds {:?}", self.dims)));
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for i in lo[0]..lo[0] + size[0] {
            for j in lo[1]..lo[1] + size[1] {
                let s = self.index(i, j, lo[2]);
                data.extend_from_slice(&self.data[s..s + size[2]]);
            }
        }
        Ok(Self { dims: size, spacing_mm: self.spacing_mm, data })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    axis_labels: [String; 3],
    format_version: u32,
}

/// `(sidecar, payload)` paths for a volume given by either file or the stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

pub fn write_volume<T: Voxel>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let (meta_path, raw_path) = volume_paths(path);
    let meta = Sidecar {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        dtype: T::DTYPE.into(),
        axis_labels: AXIS_LABELS.map(String::from),
        format_version: VOLUME_FORMAT_VERSION,
    };
    let mut bytes = Vec::with_capacity(vol.data.len() * T::SIZE);
    for &v in &vol.data {
        v.put(&mut bytes);
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// A volume of whichever dtype the sidecar declares.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    F32(Volume<f32>),
    U8(Volume<u8>),
    U16(Volume<u16>),
}

fn decode<T: Voxel>(meta: &Sidecar, bytes: &[u8], raw_path: &Path) -> Result<Volume<T>> {
    let n = meta.dims.iter().product::<usize>();
    let expected = n * T::SIZE;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { path: raw_path.to_path_buf(), expected, actual: bytes.len() });
    }
    let data = bytes.chunks_exact(T::SIZE).map(T::get).collect();
    Volume::new(meta.dims, meta.spacing_mm, data)
}

pub fn read_any(path: &Path) -> Result<AnyVolume> {
    let (meta_path, raw_path) = volume_paths(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Sidecar = serde_json::from_str(&text)?;
    if meta.format_version != VOLUME_FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: VOLUME_FORMAT_VERSION, found: meta.format_version });
    }
    if meta.axis_labels.iter().map(String::as_str).ne(AXIS_LABELS) {
        return Err(Error::Validation(format!(
            "{}: axis labels must be {AXIS_LABELS:?}, found {:?}",
            meta_path.display(),
            meta.axis_labels
        )));
    }
    if meta.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(format!("{}: spacing must be positive", meta_path.display())));
    }
    if !matches!(meta.dtype.as_str(), "f32" | "u8" | "u16") {
        return Err(Error::UnknownDtype(meta.dtype));
    }
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    Ok(match meta.dtype.as_str() {
        "f32" => AnyVolume::F32(decode(&meta, &bytes, &raw_path)?),
        "u8" => AnyVolume::U8(decode(&meta, &bytes, &raw_path)?),
        _ => AnyVolume::U16(decode(&meta, &bytes, &raw_path)?),
    })
}

/// Read an intensity image; integer payloads are widened to `f32`.
pub fn read_image(path: &Path) -> Result<Image> {
    Ok(match read_any(path)? {
        AnyVolume::F32(v) => v,
        AnyVolume::U8(v) => v.map(f32::from),
        AnyVolume::U16(v) => v.map(f32::from),
    })
}

/// Read a class map stored as `u8` or `u16` (ids must fit in a byte).
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_any(path)? {
        AnyVolume::U8(v) => Ok(v),
        AnyVolume::U16(v) => {
            if let Some(&bad) = v.data.iter().find(|&&x| x > u8::MAX as u16) {
                return Err(Error::Validation(format!("label id {bad} exceeds 255")));
            }
            Ok(v.map(|x| x as u8))
        }
        AnyVolume::F32(_) => {
            Err(Error::Validation(format!("{}: label volumes must be u8 or u16, found f32", path.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution_and_moves_corners() {
        let v = Volume::new([2, 3, 4], [1.0; 3], (0..24u16).collect()).unwrap();
        let f = v.flip(&[2]);
        assert_eq!(f.at([0, 0, 0]), v.at([0, 0, 3]));
        assert_eq!(f.flip(&[2]), v);
        let g = v.flip(&[0, 1, 2]);
        assert_eq!(g.at([0, 0, 0]), 23);
    }

    #[test]
    fn coord_inverts_index() {
        let v = Volume::filled([3, 4, 5], 0u8);
        for idx in 0..v.len() {
            let c = v.coord(idx);
            assert_eq!(v.index(c[0], c[1], c[2]), idx);
        }
    }
}
