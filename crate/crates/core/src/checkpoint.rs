//! Parameter checkpoints: one little-endian binary blob plus a JSON manifest
//! naming every array, its shape and byte offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchConfig, Model};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters whose names start with these are task specific and never
/// carried over from pretraining.
pub const TASK_SPECIFIC_PREFIXES: [&str; 3] = ["head.", "aux", "prompt."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ArchConfig,
    /// Free-form echo of the run configuration that produced the weights.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: usize,
}

/// `<stem>.json` manifest and `<stem>.bin` blob for a checkpoint path.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::UnknownDtype(other.to_string())),
    }
}

pub fn save_checkpoint<F: Element>(path: &Path, model: &Model<F>, config: serde_json::Value) -> Result<()> {
    let size = dtype_size(F::DTYPE)?;
    let mut blob = Vec::with_capacity(model.params.count() * size);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            dtype: F::DTYPE.to_string(),
        });
        for &v in p.value.data() {
            match size {
                4 => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        arch: model.cfg().clone(),
        config,
        tensors,
        total_bytes: blob.len(),
    };
    let (mpath, bpath) = checkpoint_paths(path);
    std::fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

/// A loaded checkpoint with values widened to `f64`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Vec<f64>>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (mpath, bpath) = checkpoint_paths(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_FORMAT_VERSION, found: manifest.format_version });
    }
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::LengthMismatch { path: bpath, expected: manifest.total_bytes, actual: blob.len() });
    }
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let size = dtype_size(&t.dtype)?;
        let n: usize = t.shape.iter().product();
        let end = t.offset + n * size;
        if end > blob.len() {
            return Err(Error::Validation(format!("tensor {} runs past the end of the blob", t.name)));
        }
        let bytes = &blob[t.offset..end];
        values.push(match size {
            4 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            _ => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        });
    }
    Ok(Checkpoint { manifest, values })
}

/// Outcome of copying named arrays between parameter sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Skipped because of an excluded prefix.
    pub excluded: Vec<String>,
    /// Present in the target only; left at their initial values.
    pub missing: Vec<String>,
}

fn excluded(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

impl Checkpoint {
    fn lookup(&self, name: &str) -> Option<(&TensorEntry, &Vec<f64>)> {
        self.manifest.tensors.iter().zip(&self.values).find(|(t, _)| t.name == name)
    }

    /// Rebuild the exact model the checkpoint was saved from.
    pub fn into_model<F: Element>(&self) -> Result<Model<F>> {
        let mut model = Model::<F>::build(&self.manifest.arch)?;
        let report = self.transfer_into(&mut model.params, &[])?;
        if !report.missing.is_empty() || report.copied.len() != self.manifest.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint does not match its architecture (missing {:?})",
                report.missing
            )));
        }
        Ok(model)
    }

    /// Copy every array whose name is not excluded into `store`. A shared
    /// name with a different shape is an error.
    pub fn transfer_into<F: Element>(&self, store: &mut ParamStore<F>, exclude: &[&str]) -> Result<TransferReport> {
        let mut report = TransferReport::default();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if excluded(&name, exclude) {
                report.excluded.push(name);
                continue;
            }
            match self.lookup(&name) {
                None => report.missing.push(name),
                Some((entry, vals)) => {
                    let t = Tensor::<F>::from_f64(entry.shape.clone(), vals)?;
                    store.set(id, t).map_err(|e| Error::Validation(format!("transfer: {e}")))?;
                    report.copied.push(name);
                }
            }
        }
        Ok(report)
    }
}

/// Initialize `target` from a pretrained network, skipping task-specific
/// parameters.
pub fn transfer_pretrained<F: Element>(source: &ParamStore<F>, target: &mut ParamStore<F>) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        if excluded(&name, &TASK_SPECIFIC_PREFIXES) {
            report.excluded.push(name);
            continue;
        }
        match source.find(&name) {
            None => report.missing.push(name),
            Some(sid) => {
                target.set(id, source.get(sid).clone()).map_err(|e| Error::Validation(format!("transfer: {e}")))?;
                report.copied.push(name);
            }
        }
    }
    Ok(report)
}
