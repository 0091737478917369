use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};

/// One glyph per class, so at most this many classes.
pub const MAX_SYNTHETIC_CLASSES: usize = 10;

const PALETTE: [[f32; 3]; MAX_SYNTHETIC_CLASSES] = [
    [0.55, 0.12, 0.12],
    [0.12, 0.15, 0.55],
    [0.12, 0.50, 0.15],
    [0.55, 0.50, 0.10],
    [0.45, 0.12, 0.50],
    [0.10, 0.45, 0.50],
    [0.55, 0.30, 0.10],
    [0.30, 0.30, 0.30],
    [0.35, 0.55, 0.40],
    [0.20, 0.10, 0.30],
];

const NOISE_AMPLITUDE: f32 = 0.04;
const GLYPH_LEVEL: f32 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousSpec {
    pub num_classes: usize,
    pub image_size: usize,
    /// Probability that a training image's background colour is its class colour.
    pub train_correlation: f64,
    pub test_correlation: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl SpuriousSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTHETIC_CLASSES).contains(&self.num_classes) {
            return Err(Error::config(
                "num_classes",
                format!("must be between 2 and {MAX_SYNTHETIC_CLASSES}, got {}", self.num_classes),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size", format!("must be >= 8, got {}", self.image_size)));
        }
        for (name, v) in [
            ("train_correlation", self.train_correlation),
            ("test_correlation", self.test_correlation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated train/test pair plus, per example, whether the background
/// colour matched the class.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousDataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub train_cue_match: Vec<bool>,
    pub test_cue_match: Vec<bool>,
}

fn glyph_contains(class: usize, u: f32, v: f32) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r = (du * du + dv * dv).sqrt();
    match class {
        0 => ((v * 6.0) as usize).is_multiple_of(2),
        1 => ((u * 6.0) as usize).is_multiple_of(2),
        2 => du.abs() < 0.14 || dv.abs() < 0.14,
        3 => (u - v).abs() < 0.16 || (u + v - 1.0).abs() < 0.16,
        4 => (0.30..0.48).contains(&r),
        5 => du.abs() < 0.32 && dv.abs() < 0.32,
        6 => ((u * 4.0) as usize + (v * 4.0) as usize).is_multiple_of(2),
        7 => du.abs() + dv.abs() < 0.45,
        8 => r < 0.36,
        9 => {
            let (fu, fv) = ((u * 3.0).fract() - 0.5, (v * 3.0).fract() - 0.5);
            fu * fu + fv * fv < 0.09
        }
        _ => unreachable!("glyph index checked by the spec"),
    }
}

/// Binary `size × size` glyph for `class`, sampled at pixel centres. Never
/// empty: a glyph too thin to hit any centre falls back to the middle pixel.
pub fn glyph_mask(class: usize, size: usize) -> Array2<u8> {
    let mut m = Array2::from_shape_fn((size, size), |(y, x)| {
        let u = (x as f32 + 0.5) / size as f32;
        let v = (y as f32 + 0.5) / size as f32;
        glyph_contains(class, u, v) as u8
    });
    if !m.iter().any(|&v| v == 1) {
        m[[size / 2, size / 2]] = 1;
    }
    m
}

fn generate_split(spec: &SpuriousSpec, n: usize, correlation: f64, stream: u64) -> Result<(LabeledBatch, Vec<bool>)> {
    let (k, s) = (spec.num_classes, spec.image_size);
    let g = s / 2;
    let jitter = (s / 8) as i64;
    let glyphs: Vec<_> = (0..k).map(|c| glyph_mask(c, g)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let mut images = Array4::<f32>::zeros((n, 3, s, s));
    let mut masks = Array3::<u8>::zeros((n, s, s));
    let mut labels = Vec::with_capacity(n);
    let mut matched = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let cue_matches = rng.random_bool(correlation);
        let cue = if cue_matches {
            y
        } else {
            let other = rng.random_range(0..k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        };
        let centre = (s - g) as i64 / 2;
        let oy = (centre + rng.random_range(-jitter..=jitter)).clamp(0, (s - g) as i64) as usize;
        let ox = (centre + rng.random_range(-jitter..=jitter)).clamp(0, (s - g) as i64) as usize;
        let colour = PALETTE[cue];
        for c in 0..3 {
            for py in 0..s {
                for px in 0..s {
                    let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                    images[[i, c, py, px]] = (colour[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
        for ((gy, gx), &on) in glyphs[y].indexed_iter() {
            if on == 1 {
                masks[[i, oy + gy, ox + gx]] = 1;
                for c in 0..3 {
                    images[[i, c, oy + gy, ox + gx]] = GLYPH_LEVEL;
                }
            }
        }
        labels.push(y);
        matched.push(cue_matches);
    }
    Ok((LabeledBatch::new(images, labels, Some(masks), k)?, matched))
}

/// Class-glyph images on a colour cue that agrees with the class at the
/// configured rates. A pure function of the spec.
pub fn generate_spurious_dataset(spec: &SpuriousSpec) -> Result<SpuriousDataset> {
    spec.validate()?;
    let (train, train_cue_match) = generate_split(spec, spec.train_samples, spec.train_correlation, 0)?;
    let (test, test_cue_match) = generate_split(spec, spec.test_samples, spec.test_correlation, 1)?;
    Ok(SpuriousDataset {
        train,
        test,
        train_cue_match,
        test_cue_match,
    })
}
