//! Dataset directories: `case_NNN_image` / `case_NNN_labels` volume pairs
//! plus a `schema.json`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::schema::{load_schema, save_schema, LabelSchema};
use crate::volume::{read_image, read_labels, write_volume, Image, LabelVolume};

pub const SCHEMA_FILE: &str = "schema.json";

pub fn image_path(dir: &Path, case: &str) -> PathBuf {
    dir.join(format!("{case}_image.json"))
}

pub fn labels_path(dir: &Path, case: &str) -> PathBuf {
    dir.join(format!("{case}_labels.json"))
}

pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

/// Write volumes and schema; returns the case names.
pub fn write_dataset(dir: &Path, cases: &[(Image, LabelVolume)], schema: &LabelSchema) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_schema(schema, &dir.join(SCHEMA_FILE))?;
    let mut names = Vec::with_capacity(cases.len());
    for (i, (img, lab)) in cases.iter().enumerate() {
        let name = case_name(i);
        write_volume(&image_path(dir, &name), img)?;
        write_volume(&labels_path(dir, &name), lab)?;
        names.push(name);
    }
    Ok(names)
}

/// Case names with an image sidecar in `dir`, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = file.strip_suffix("_image.json") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!("no *_image.json cases in {}", dir.display())));
    }
    Ok(names)
}

/// Schema from `dir/schema.json`, or the built-in dental schema when absent.
pub fn dataset_schema(dir: &Path) -> Result<LabelSchema> {
    let p = dir.join(SCHEMA_FILE);
    if p.exists() {
        load_schema(&p)
    } else {
        Ok(LabelSchema::dental())
    }
}

/// Every labelled case in `dir`.
pub fn read_dataset(dir: &Path) -> Result<Vec<(Image, LabelVolume)>> {
    list_cases(dir)?
        .iter()
        .map(|c| {
            let img = read_image(&image_path(dir, c))?;
            let lab = read_labels(&labels_path(dir, c))?;
            img.same_grid(&lab).map_err(|e| Error::Validation(format!("{c}: {e}")))?;
            Ok((img, lab))
        })
        .collect()
}

/// Images only (labels are not needed for pretraining).
pub fn read_images(dir: &Path) -> Result<Vec<Image>> {
    list_cases(dir)?.iter().map(|c| read_image(&image_path(dir, c))).collect()
}
