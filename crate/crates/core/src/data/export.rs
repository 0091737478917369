use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabeledBatch, SpuriousDataset, SpuriousSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SpuriousSpec,
    /// sha256 of every array file, keyed by file name.
    pub files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn npy_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Ingestion {
        file: path.to_path_buf(),
        message: e.to_string(),
    }
}

type NpyWriter<'a> = Box<dyn Fn(&Path) -> std::result::Result<(), ndarray_npy::WriteNpyError> + 'a>;

fn write_split(dir: &Path, split: &str, batch: &LabeledBatch, cue: &[bool], files: &mut BTreeMap<String, String>) -> Result<()> {
    let labels: Array1<i64> = batch.labels().iter().map(|&y| y as i64).collect();
    let cue: Array1<u8> = cue.iter().map(|&m| m as u8).collect();
    let masks = batch.fg_masks().cloned().unwrap_or_else(|| Array3::zeros((0, 0, 0)));
    let outputs: [(String, NpyWriter); 4] = [
        (format!("{split}_images.npy"), Box::new(|p| write_npy(p, batch.images()))),
        (format!("{split}_labels.npy"), Box::new(|p| write_npy(p, &labels))),
        (format!("{split}_masks.npy"), Box::new(|p| write_npy(p, &masks))),
        (format!("{split}_cue_match.npy"), Box::new(|p| write_npy(p, &cue))),
    ];
    for (name, write) in outputs {
        let path = dir.join(&name);
        write(&path).map_err(|e| npy_error(&path, e))?;
        files.insert(name, sha256_file(&path)?);
    }
    Ok(())
}

/// Writes both splits as `.npy` arrays plus a manifest echoing the spec
/// and the checksum of every file.
pub fn export_dataset(dataset: &SpuriousDataset, spec: &SpuriousSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    write_split(dir, "train", &dataset.train, &dataset.train_cue_match, &mut files)?;
    write_split(dir, "test", &dataset.test, &dataset.test_cue_match, &mut files)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_split(dir: &Path, split: &str, k: usize) -> Result<(LabeledBatch, Vec<bool>)> {
    let p = |suffix: &str| dir.join(format!("{split}_{suffix}.npy"));
    let images: Array4<f32> = read_npy(p("images")).map_err(|e| npy_error(&p("images"), e))?;
    let labels: Array1<i64> = read_npy(p("labels")).map_err(|e| npy_error(&p("labels"), e))?;
    let masks: Array3<u8> = read_npy(p("masks")).map_err(|e| npy_error(&p("masks"), e))?;
    let cue: Array1<u8> = read_npy(p("cue_match")).map_err(|e| npy_error(&p("cue_match"), e))?;
    let labels = labels
        .iter()
        .map(|&y| usize::try_from(y).map_err(|_| npy_error(&p("labels"), format!("negative label {y}"))))
        .collect::<Result<Vec<_>>>()?;
    let masks = (!masks.is_empty()).then_some(masks);
    let batch = LabeledBatch::new(images, labels, masks, k).map_err(|e| npy_error(&p("images"), e))?;
    Ok((batch, cue.iter().map(|&c| c == 1).collect()))
}

/// Loads a directory written by [`export_dataset`], verifying checksums.
pub fn load_exported(dir: &Path) -> Result<(SpuriousDataset, Manifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| npy_error(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| npy_error(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(npy_error(&mpath, format!("unsupported format version {}", manifest.format_version)));
    }
    for (name, expected) in &manifest.files {
        let path = dir.join(name);
        let actual = sha256_file(&path).map_err(|e| npy_error(&path, e))?;
        if &actual != expected {
            return Err(npy_error(&path, "checksum does not match the manifest"));
        }
    }
    let k = manifest.spec.num_classes;
    let (train, train_cue_match) = read_split(dir, "train", k)?;
    let (test, test_cue_match) = read_split(dir, "test", k)?;
    Ok((
        SpuriousDataset {
            train,
            test,
            train_cue_match,
            test_cue_match,
        },
        manifest,
    ))
}
