//! Grad-CAM attention maps, threshold-based background separation and
//! attention/region IoU.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::real::Real;

/// Where an attention map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapSource {
    AuxModel,
    TrainedModel,
}

/// Per-example pixel attention in `[0, 1]`, shaped `(B, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array3<f32>,
    pub source: MapSource,
    pub target_class: Vec<usize>,
}

/// Threshold `ω ∈ (0, 1)` below which a pixel counts as background.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct BackgroundThreshold(f64);

impl BackgroundThreshold {
    pub fn new(omega: f64) -> Result<Self> {
        if omega > 0.0 && omega < 1.0 {
            Ok(BackgroundThreshold(omega))
        } else {
            Err(Error::config(
                "loss.omega",
                format!("threshold {omega} must lie strictly between 0 and 1"),
            ))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for BackgroundThreshold {
    fn default() -> Self {
        BackgroundThreshold(0.35)
    }
}

impl<'de> Deserialize<'de> for BackgroundThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        BackgroundThreshold::new(v).map_err(serde::de::Error::custom)
    }
}

/// Bilinear resize of one plane with half-pixel centres
/// (`align_corners = false`).
pub fn bilinear_resize(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Min-max normalises a plane in place; a constant plane becomes all zeros.
fn normalize_plane(p: &mut Array2<f64>) {
    let (lo, hi) = p
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        p.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        p.fill(0.0);
    }
}

/// Grad-CAM from tap-point features and their gradients:
/// `ReLU(Σ_c mean(∂z/∂A_c) · A_c)`, upsampled to `(out_h, out_w)` and
/// normalised per example.
pub fn cam_from_features<T: Real>(
    features: &Array4<T>,
    grads: &Array4<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Array3<f32>> {
    if features.dim() != grads.dim() {
        return Err(Error::contract("feature and gradient shapes differ"));
    }
    let (b, c, fh, fw) = features.dim();
    if fh == 0 || fw == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::contract("empty spatial dimensions"));
    }
    let mut out = Array3::zeros((b, out_h, out_w));
    let area = (fh * fw) as f64;
    for i in 0..b {
        let mut raw = Array2::<f64>::zeros((fh, fw));
        for ch in 0..c {
            let weight: f64 = grads
                .slice(ndarray::s![i, ch, .., ..])
                .iter()
                .map(|g| g.to_f64_lossy())
                .sum::<f64>()
                / area;
            if weight == 0.0 {
                continue;
            }
            Zip::from(&mut raw)
                .and(features.slice(ndarray::s![i, ch, .., ..]))
                .for_each(|r, &f| *r += weight * f.to_f64_lossy());
        }
        raw.mapv_inplace(|v| v.max(0.0));
        let mut up = bilinear_resize(raw.view(), out_h, out_w);
        normalize_plane(&mut up);
        out.index_axis_mut(Axis(0), i)
            .assign(&up.mapv(|v| v as f32));
    }
    Ok(out)
}

/// Grad-CAM attention of `model` for `targets`, at the input resolution.
pub fn grad_cam<T: Real>(
    model: &Classifier<T>,
    images: &Array4<T>,
    targets: &[usize],
    source: MapSource,
) -> Result<AttentionMap> {
    let (_, _, h, w) = images.dim();
    let (features, grads) = model.features_and_grads(images, targets)?;
    Ok(AttentionMap {
        values: cam_from_features(&features, &grads, h, w)?,
        source,
        target_class: targets.to_vec(),
    })
}

fn check_map_dims(images: &Array4<f32>, map: &AttentionMap) -> Result<()> {
    let (b, _, h, w) = images.dim();
    if map.values.dim() != (b, h, w) {
        return Err(Error::contract(format!(
            "attention map {:?} does not match images (B, H, W) = {:?}",
            map.values.dim(),
            (b, h, w)
        )));
    }
    Ok(())
}

fn mask_by<F: Fn(f32) -> bool>(images: &Array4<f32>, map: &AttentionMap, keep: F) -> Result<Array4<f32>> {
    check_map_dims(images, map)?;
    let mut out = images.clone();
    for (mut img, m) in out.axis_iter_mut(Axis(0)).zip(map.values.axis_iter(Axis(0))) {
        for mut plane in img.axis_iter_mut(Axis(0)) {
            Zip::from(&mut plane).and(&m).for_each(|v, &a| {
                if !keep(a) {
                    *v = 0.0;
                }
            });
        }
    }
    Ok(out)
}

/// Keeps pixels whose attention is below `ω`, zeroing the rest in every
/// channel.
pub fn separate_background(
    images: &Array4<f32>,
    map: &AttentionMap,
    omega: BackgroundThreshold,
) -> Result<Array4<f32>> {
    let w = omega.value() as f32;
    mask_by(images, map, |a| a < w)
}

/// Complement of [`separate_background`]: pixels with attention `>= ω`.
pub fn separate_attended(
    images: &Array4<f32>,
    map: &AttentionMap,
    omega: BackgroundThreshold,
) -> Result<Array4<f32>> {
    let w = omega.value() as f32;
    mask_by(images, map, |a| a >= w)
}

/// IoU of two binary masks; an empty union scores 0.
pub fn iou(a: impl IntoIterator<Item = bool>, b: impl IntoIterator<Item = bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.into_iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-example IoU between the map binarised at `bin_threshold`
/// (`M >= t`) and a binary region.
pub fn attention_region_iou(map: &AttentionMap, region: &Array3<u8>, bin_threshold: f32) -> Result<Vec<f64>> {
    if map.values.dim() != region.dim() {
        return Err(Error::contract(format!(
            "region {:?} does not match attention map {:?}",
            region.dim(),
            map.values.dim()
        )));
    }
    Ok(map
        .values
        .axis_iter(Axis(0))
        .zip(region.axis_iter(Axis(0)))
        .map(|(m, r)| iou(m.iter().map(|&v| v >= bin_threshold), r.iter().map(|&v| v != 0)))
        .collect())
}
