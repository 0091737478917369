//! Datasets: a synthetic spurious-background generator with exact
//! foreground masks, CIFAR binary ingestion and an npy export format.

mod cifar;
mod export;
mod synthetic;

use std::ops::Range;

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};

pub use cifar::{load_standard_dataset, DatasetLimits, StandardDataset};
pub use export::{export_dataset, load_exported, Manifest, MANIFEST_FILE};
pub use synthetic::{generate_spurious_dataset, glyph_mask, SpuriousDataset, SpuriousSpec, MAX_SYNTHETIC_CLASSES};

/// Images in `[0, 1]` with labels in `[0, K)` and optional binary
/// foreground masks. Construction validates every invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    images: Array4<f32>,
    labels: Vec<usize>,
    fg_masks: Option<Array3<u8>>,
    num_classes: usize,
}

impl LabeledBatch {
    pub fn new(
        images: Array4<f32>,
        labels: Vec<usize>,
        fg_masks: Option<Array3<u8>>,
        num_classes: usize,
    ) -> Result<Self> {
        let (b, _, h, w) = images.dim();
        if labels.len() != b {
            return Err(Error::contract(format!("{} labels for {b} images", labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::contract("num_classes must be positive"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {y} outside [0, {num_classes})")));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(m) = &fg_masks {
            if m.dim() != (b, h, w) {
                return Err(Error::contract(format!(
                    "mask shape {:?} does not match images {:?}",
                    m.dim(),
                    images.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::contract("masks must contain only 0 and 1"));
            }
            for (i, mask) in m.outer_iter().enumerate() {
                if !mask.iter().any(|&v| v == 1) {
                    return Err(Error::contract(format!("mask {i} has no foreground pixel")));
                }
            }
        }
        Ok(LabeledBatch {
            images,
            labels,
            fg_masks,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn fg_masks(&self) -> Option<&Array3<u8>> {
        self.fg_masks.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(C, H, W)` of a single example.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn into_parts(self) -> (Array4<f32>, Vec<usize>, Option<Array3<u8>>) {
        (self.images, self.labels, self.fg_masks)
    }

    /// Contiguous sub-batch. Panics if the range is out of bounds.
    pub fn slice(&self, range: Range<usize>) -> LabeledBatch {
        LabeledBatch {
            images: self.images.slice(ndarray::s![range.clone(), .., .., ..]).to_owned(),
            labels: self.labels[range.clone()].to_vec(),
            fg_masks: self.fg_masks.as_ref().map(|m| m.slice(ndarray::s![range, .., ..]).to_owned()),
            num_classes: self.num_classes,
        }
    }

    /// Sub-batch gathered in the given order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            fg_masks: self.fg_masks.as_ref().map(|m| m.select(Axis(0), indices)),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn truncated(&self, n: usize) -> LabeledBatch {
        self.slice(0..n.min(self.len()))
    }

    /// Same labels and masks with different images, re-validated.
    pub fn with_images(&self, images: Array4<f32>) -> Result<LabeledBatch> {
        if images.dim() != self.images.dim() {
            return Err(Error::contract("replacement images change the batch shape"));
        }
        LabeledBatch::new(images, self.labels.clone(), self.fg_masks.clone(), self.num_classes)
    }

    /// Iterates over consecutive chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = LabeledBatch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| self.slice(s..(s + size).min(self.len())))
    }
}

/// Splits a masked batch into foreground-only and background-only images.
/// The two outputs sum to the input exactly.
pub fn split_foreground_background(batch: &LabeledBatch) -> Result<(LabeledBatch, LabeledBatch)> {
    let masks = batch
        .fg_masks()
        .ok_or_else(|| Error::Precondition("foreground masks are required to split a batch".into()))?;
    let mut fg = batch.images.clone();
    let mut bg = batch.images.clone();
    for (i, mask) in masks.outer_iter().enumerate() {
        for mut channel in fg.index_axis_mut(Axis(0), i).outer_iter_mut() {
            ndarray::Zip::from(&mut channel).and(&mask).for_each(|v, &m| {
                if m == 0 {
                    *v = 0.0;
                }
            });
        }
        for mut channel in bg.index_axis_mut(Axis(0), i).outer_iter_mut() {
            ndarray::Zip::from(&mut channel).and(&mask).for_each(|v, &m| {
                if m == 1 {
                    *v = 0.0;
                }
            });
        }
    }
    let fg = LabeledBatch { images: fg, ..batch.clone() };
    let bg = LabeledBatch { images: bg, ..batch.clone() };
    Ok((fg, bg))
}
