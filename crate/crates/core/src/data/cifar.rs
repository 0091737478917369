use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardDataset {
    Cifar10,
    Cifar100,
}

impl StandardDataset {
    pub fn num_classes(self) -> usize {
        match self {
            StandardDataset::Cifar10 => 10,
            StandardDataset::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            StandardDataset::Cifar10 => 1,
            StandardDataset::Cifar100 => 2,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            StandardDataset::Cifar10 => "cifar-10-batches-bin",
            StandardDataset::Cifar100 => "cifar-100-binary",
        }
    }

    fn train_files(self) -> Vec<String> {
        match self {
            StandardDataset::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            StandardDataset::Cifar100 => vec!["train.bin".into()],
        }
    }

    fn test_files(self) -> Vec<String> {
        match self {
            StandardDataset::Cifar10 => vec!["test_batch.bin".into()],
            StandardDataset::Cifar100 => vec!["test.bin".into()],
        }
    }
}

impl FromStr for StandardDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(StandardDataset::Cifar10),
            "cifar100" => Ok(StandardDataset::Cifar100),
            _ => Err(Error::config("dataset.name", format!("unknown dataset `{s}` (expected cifar10 or cifar100)"))),
        }
    }
}

/// Optional truncation to the first `n` examples of each split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLimits {
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
}

fn ingestion(file: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        message: message.into(),
    }
}

fn read_records(
    dir: &Path,
    files: &[String],
    dataset: StandardDataset,
    limit: Option<usize>,
) -> Result<LabeledBatch> {
    let record = dataset.label_bytes() + PIXELS;
    let k = dataset.num_classes();
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        if limit.is_some_and(|n| labels.len() >= n) {
            break;
        }
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| ingestion(&path, e.to_string()))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(ingestion(
                &path,
                format!("size {} is not a positive multiple of the {record}-byte record", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(record) {
            if limit.is_some_and(|n| labels.len() >= n) {
                break;
            }
            let label = rec[dataset.label_bytes() - 1] as usize;
            if label >= k {
                return Err(ingestion(&path, format!("label {label} out of range for {k} classes")));
            }
            labels.push(label);
            pixels.extend(rec[dataset.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let images = Array4::from_shape_vec((labels.len(), 3, SIDE, SIDE), pixels)
        .map_err(|e| ingestion(dir, e.to_string()))?;
    LabeledBatch::new(images, labels, None, k)
}

/// Reads a CIFAR-10/100 binary distribution. `path` may point at the
/// extracted batch directory or at its parent.
pub fn load_standard_dataset(
    path: &Path,
    name: &str,
    limits: DatasetLimits,
) -> Result<(LabeledBatch, LabeledBatch)> {
    let dataset: StandardDataset = name.parse()?;
    let nested = path.join(dataset.subdir());
    let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
    let train = read_records(&dir, &dataset.train_files(), dataset, limits.train)?;
    let test = read_records(&dir, &dataset.test_files(), dataset, limits.test)?;
    Ok((train, test))
}
