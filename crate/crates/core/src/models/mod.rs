//! Small convolutional classifiers with a Grad-CAM tap on the last
//! convolutional stage.

mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;
use layers::{backward_sequence, forward_sequence, to_batch_major, to_channel_major, Cache, Layer};

pub use checkpoint::{Checkpoint, RngState, TrainingStep};

/// Registered architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "small-cnn")]
    SmallCnn,
    #[serde(rename = "small-resnet")]
    SmallResnet,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::SmallCnn => "small-cnn",
            ArchKind::SmallResnet => "small-resnet",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(ArchKind::SmallCnn),
            "small-resnet" => Ok(ArchKind::SmallResnet),
            other => Err(Error::config(
                "model.arch",
                format!("unknown architecture `{other}` (expected small-cnn or small-resnet)"),
            )),
        }
    }
}

/// Everything needed to rebuild a classifier's layer graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    /// Smallest spatial input the architecture accepts.
    pub fn min_input_size(&self) -> usize {
        match self.kind {
            ArchKind::SmallCnn => 4,
            ArchKind::SmallResnet => 4,
        }
    }
}

/// Models attacks can run against: logits plus input gradients.
pub trait Differentiable<T: Real> {
    fn num_classes(&self) -> usize;

    fn logits(&self, images: &Array4<T>) -> Result<Array2<T>>;

    /// Returns the logits and the gradient of `Σ_b ⟨g_b, z_b⟩` with respect to
    /// the images, where `g = loss_grad(z)` is evaluated on the same logits.
    fn input_gradient(
        &self,
        images: &Array4<T>,
        loss_grad: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array4<T>)>;
}

/// A convolutional classifier split at its tap point into a feature stack and
/// a pooling/linear head.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    arch: ArchDescriptor,
    params: Vec<ArrayD<T>>,
    param_names: Vec<String>,
    features: Vec<Layer>,
    head: Vec<Layer>,
}

/// Recorded forward pass, consumed by [`Classifier::backward`].
pub struct Tape<T> {
    features: Vec<Cache<T>>,
    head: Vec<Cache<T>>,
}

struct GraphBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

impl GraphBuilder<'_> {
    fn push(&mut self, name: String, tensor: ArrayD<f64>) -> usize {
        self.params.push(tensor);
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Layer {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, kernel, kernel]), || {
            self.rng.random_range(-bound..bound)
        });
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Layer::Conv {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin]), || {
            self.rng.random_range(-bound..bound)
        });
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Layer::Dense { weight, bias }
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let body = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
        ];
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Box::new(self.conv(&format!("{name}.shortcut"), cin, cout, 1, stride)));
        Layer::Residual { body, shortcut }
    }
}

fn build_graph(arch: &ArchDescriptor, rng: &mut ChaCha8Rng) -> (Vec<Layer>, Vec<Layer>, GraphParams) {
    let mut g = GraphBuilder {
        rng,
        params: Vec::new(),
        names: Vec::new(),
    };
    let cin = arch.in_channels;
    let k = arch.num_classes;
    let (features, head) = match arch.kind {
        ArchKind::SmallCnn => {
            let features = vec![
                g.conv("conv1", cin, 8, 3, 2),
                Layer::Relu,
                g.conv("conv2", 8, 16, 3, 2),
                Layer::Relu,
            ];
            let head = vec![Layer::GlobalAvgPool, g.dense("fc", 16, k)];
            (features, head)
        }
        ArchKind::SmallResnet => {
            let features = vec![
                g.conv("stem", cin, 16, 3, 2),
                Layer::Relu,
                g.residual("block1", 16, 16, 1),
                g.residual("block2", 16, 32, 2),
            ];
            let head = vec![Layer::GlobalAvgPool, g.dense("fc", 32, k)];
            (features, head)
        }
    };
    (features, head, GraphParams {
        params: g.params,
        names: g.names,
    })
}

struct GraphParams {
    params: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

/// Builds a freshly initialised classifier. Initialisation is a pure function
/// of `(arch, seed)`.
pub fn build_classifier<T: Real>(arch: ArchDescriptor, seed: u64) -> Result<Classifier<T>> {
    if arch.num_classes < 2 {
        return Err(Error::config("model.num_classes", "need at least 2 classes"));
    }
    if arch.in_channels == 0 {
        return Err(Error::config("model.in_channels", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, head, gp) = build_graph(&arch, &mut rng);
    Ok(Classifier {
        arch,
        params: gp.params.into_iter().map(|p| p.mapv(T::from_f64_lossy)).collect(),
        param_names: gp.names,
        features,
        head,
    })
}

/// Convenience wrapper taking the architecture by name.
pub fn build_named<T: Real>(name: &str, in_channels: usize, num_classes: usize, seed: u64) -> Result<Classifier<T>> {
    let kind = name.parse()?;
    build_classifier(
        ArchDescriptor {
            kind,
            in_channels,
            num_classes,
        },
        seed,
    )
}

impl<T: Real> Classifier<T> {
    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[ArrayD<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zeros_like_params(&self) -> Vec<ArrayD<T>> {
        self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect()
    }

    /// Replaces the parameters, checking shapes.
    pub fn set_params(&mut self, params: Vec<ArrayD<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| p.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())))
                .collect(),
            param_names: self.param_names.clone(),
            features: self.features.clone(),
            head: self.head.clone(),
        }
    }

    /// SHA-256 over the little-endian `f64` image of every parameter.
    pub fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.iter() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_input(&self, images: &Array4<T>) -> Result<()> {
        let (b, c, h, w) = images.dim();
        if c != self.arch.in_channels {
            return Err(Error::contract(format!(
                "{} expects {} input channels, got {c}",
                self.arch.kind, self.arch.in_channels
            )));
        }
        let min = self.arch.min_input_size();
        if h < min || w < min {
            return Err(Error::contract(format!(
                "{} needs inputs of at least {min}x{min}, got {h}x{w}",
                self.arch.kind
            )));
        }
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        Ok(())
    }

    /// Logits for a `(B, C, H, W)` batch.
    pub fn forward(&self, images: &Array4<T>) -> Result<Array2<T>> {
        self.check_input(images)?;
        let x = to_channel_major(images);
        let f = forward_sequence(&self.features, x, &self.params, None);
        Ok(self.head_logits_internal(f, None))
    }

    /// Tap-point feature maps `(B, C_f, H_f, W_f)`.
    pub fn forward_features(&self, images: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(images)?;
        let f = forward_sequence(&self.features, to_channel_major(images), &self.params, None);
        Ok(to_batch_major(&f))
    }

    /// Logits computed from tap-point feature maps.
    pub fn forward_head(&self, features: &Array4<T>) -> Array2<T> {
        self.head_logits_internal(to_channel_major(features), None)
    }

    fn head_logits_internal(&self, f: Array4<T>, cache: Option<&mut Vec<Cache<T>>>) -> Array2<T> {
        let z = forward_sequence(&self.head, f, &self.params, cache);
        let (k, b, _, _) = z.dim();
        z.into_shape_with_order((k, b))
            .expect("logit view")
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
    }

    /// Forward pass that records a tape for [`Self::backward`].
    pub fn forward_tape(&self, images: &Array4<T>) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(images)?;
        let mut fc = Vec::with_capacity(self.features.len());
        let f = forward_sequence(
            &self.features,
            to_channel_major(images),
            &self.params,
            Some(&mut fc),
        );
        let mut hc = Vec::with_capacity(self.head.len());
        let z = self.head_logits_internal(f, Some(&mut hc));
        Ok((
            z,
            Tape {
                features: fc,
                head: hc,
            },
        ))
    }

    /// Back-propagates `dlogits` (B, K). Parameter gradients are added into
    /// `param_grads`; the image gradient is returned when `input_grad` is set.
    pub fn backward(
        &self,
        tape: Tape<T>,
        dlogits: &Array2<T>,
        param_grads: Option<&mut [ArrayD<T>]>,
        input_grad: bool,
    ) -> Option<Array4<T>> {
        let (b, k) = dlogits.dim();
        let g = dlogits
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k, b, 1, 1))
            .expect("dlogit view");
        let mut param_grads = param_grads;
        let gf = backward_sequence(
            &self.head,
            tape.head,
            g,
            &self.params,
            param_grads.as_deref_mut(),
            true,
        )
        .expect("head input gradient");
        backward_sequence(
            &self.features,
            tape.features,
            gf,
            &self.params,
            param_grads,
            input_grad,
        )
        .map(|g| to_batch_major(&g))
    }

    /// Tap-point features and `∂ z_target / ∂ features` from one forward pass.
    pub fn features_and_grads(
        &self,
        images: &Array4<T>,
        targets: &[usize],
    ) -> Result<(Array4<T>, Array4<T>)> {
        self.check_input(images)?;
        let b = images.dim().0;
        if targets.len() != b {
            return Err(Error::contract(format!(
                "{} target labels for a batch of {b}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.num_classes()) {
            return Err(Error::contract(format!(
                "target class {t} out of range for {} classes",
                self.num_classes()
            )));
        }
        let f = forward_sequence(&self.features, to_channel_major(images), &self.params, None);
        let mut hc = Vec::with_capacity(self.head.len());
        let z = self.head_logits_internal(f.clone(), Some(&mut hc));
        let mut onehot = Array2::<T>::zeros(z.raw_dim());
        for (i, &t) in targets.iter().enumerate() {
            onehot[[i, t]] = T::one();
        }
        let (k, _) = (onehot.ncols(), ());
        let g = onehot
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k, b, 1, 1))
            .expect("onehot view");
        let grads = backward_sequence(&self.head, hc, g, &self.params, None, true)
            .expect("tap gradient");
        Ok((to_batch_major(&f), to_batch_major(&grads)))
    }

    pub(crate) fn from_parts(arch: ArchDescriptor, params: Vec<ArrayD<T>>) -> Result<Self> {
        let mut m = build_classifier::<T>(arch, 0)?;
        m.set_params(params)?;
        Ok(m)
    }
}

impl<T: Real> Differentiable<T> for Classifier<T> {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn logits(&self, images: &Array4<T>) -> Result<Array2<T>> {
        self.forward(images)
    }

    fn input_gradient(
        &self,
        images: &Array4<T>,
        loss_grad: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array4<T>)> {
        let (z, tape) = self.forward_tape(images)?;
        let g = loss_grad(&z);
        let dx = self
            .backward(tape, &g, None, true)
            .expect("input gradient requested");
        Ok((z, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn probe(b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 3, 12, 12), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = build_named::<f32>("small-resnet", 3, 10, 0).unwrap();
        let b = build_named::<f32>("small-resnet", 3, 10, 0).unwrap();
        assert_eq!(a.parameter_checksum(), b.parameter_checksum());
        let c = build_named::<f32>("small-resnet", 3, 10, 1).unwrap();
        assert_ne!(a.parameter_checksum(), c.parameter_checksum());
    }

    #[test]
    fn zero_batch_gives_finite_logits_of_right_shape() {
        let m = build_named::<f32>("small-cnn", 3, 2, 1).unwrap();
        let z = m.forward(&Array4::zeros((4, 3, 32, 32))).unwrap();
        assert_eq!(z.dim(), (4, 2));
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unknown_arch_is_config_error() {
        let err = build_named::<f32>("wrn-28-10", 3, 10, 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn wrong_channel_count_is_contract_error() {
        let m = build_named::<f32>("small-cnn", 3, 2, 0).unwrap();
        let err = m.forward(&Array4::zeros((1, 1, 32, 32))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn duplicated_rows_give_identical_logits() {
        let m = build_named::<f64>("small-resnet", 3, 4, 3).unwrap();
        let x = probe(1, 9);
        let mut two = Array4::zeros((2, 3, 12, 12));
        two.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&x);
        two.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&x);
        let z = m.forward(&two).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn dead_channel_has_zero_tap_gradient() {
        let mut m = build_named::<f64>("small-cnn", 3, 3, 5).unwrap();
        // zero the fc column reading channel 0 of the tap
        let fc = m
            .param_names()
            .iter()
            .position(|n| n == "fc.weight")
            .unwrap();
        m.params_mut()[fc]
            .slice_each_axis_mut(|ax| {
                if ax.axis.index() == 1 {
                    ndarray::Slice::from(0..1)
                } else {
                    ndarray::Slice::from(..)
                }
            })
            .fill(0.0);
        let (feat, grads) = m.features_and_grads(&probe(3, 1), &[0, 1, 2]).unwrap();
        assert_eq!(feat.dim().0, 3);
        assert_eq!(grads.dim(), feat.dim());
        assert!(grads
            .slice(ndarray::s![.., 0, .., ..])
            .iter()
            .all(|&g| g == 0.0));
    }

    fn central_difference_check(name: &str) {
        let m = build_named::<f64>(name, 3, 3, 11).unwrap();
        let x = probe(2, 4);
        let labels = [1usize, 2];
        let weights = Array2::from_shape_fn((2, 3), |(i, k)| if k == labels[i] { 1.0 } else { 0.3 });
        let mut g = |_: &Array2<f64>| weights.clone();
        let (_, dx) = m.input_gradient(&x, &mut g).unwrap();
        let objective = |x: &Array4<f64>| -> f64 {
            let z = m.forward(x).unwrap();
            (&z * &weights).sum()
        };
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let idx = [
                rng.random_range(0..2),
                rng.random_range(0..3),
                rng.random_range(0..12),
                rng.random_range(0..12),
            ];
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let ad = dx[idx];
            let scale = fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                (fd - ad).abs() / scale < 1e-3 || (fd - ad).abs() < 1e-8,
                "{name} probe {idx:?}: fd {fd} vs autodiff {ad}"
            );
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        central_difference_check("small-cnn");
        central_difference_check("small-resnet");
    }

    #[test]
    fn tap_gradients_match_finite_differences() {
        let m = build_named::<f64>("small-resnet", 3, 4, 2).unwrap();
        let x = probe(2, 8);
        let targets = [3usize, 0];
        let (feat, grads) = m.features_and_grads(&x, &targets).unwrap();
        let target_logits = |f: &Array4<f64>| -> f64 {
            let z = m.forward_head(f);
            targets.iter().enumerate().map(|(i, &t)| z[[i, t]]).sum()
        };
        let h = 1e-4;
        let (b, c, hh, ww) = feat.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let idx = [
                rng.random_range(0..b),
                rng.random_range(0..c),
                rng.random_range(0..hh),
                rng.random_range(0..ww),
            ];
            let mut fp = feat.clone();
            fp[idx] += h;
            let mut fm = feat.clone();
            fm[idx] -= h;
            let fd = (target_logits(&fp) - target_logits(&fm)) / (2.0 * h);
            let ad = grads[idx];
            assert!((fd - ad).abs() <= 1e-3 * fd.abs().max(ad.abs()).max(1e-6));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = build_named::<f64>("small-resnet", 3, 3, 21).unwrap();
        let x = probe(2, 5);
        let w = Array2::from_shape_fn((2, 3), |(i, k)| (i as f64 + 1.0) * (k as f64 - 1.0));
        let (_, tape) = m.forward_tape(&x).unwrap();
        let mut grads = m.zeros_like_params();
        m.backward(tape, &w, Some(&mut grads), false);
        let objective = |m: &Classifier<f64>| (&m.forward(&x).unwrap() * &w).sum();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..12 {
            let pi = rng.random_range(0..m.params().len());
            let flat = rng.random_range(0..m.params()[pi].len());
            let mut mp = m.clone();
            mp.params_mut()[pi].as_slice_mut().unwrap()[flat] += h;
            let mut mm = m.clone();
            mm.params_mut()[pi].as_slice_mut().unwrap()[flat] -= h;
            let fd = (objective(&mp) - objective(&mm)) / (2.0 * h);
            let ad = grads[pi].as_slice().unwrap()[flat];
            assert!(
                (fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()).max(1e-4),
                "{}: fd {fd} vs {ad}",
                m.param_names()[pi]
            );
        }
    }
}
