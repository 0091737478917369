//! C ABI over the `dhat` core crate.
//!
//! Models live behind an opaque [`DhatModel`] handle. Every fallible call
//! returns a [`DhatStatus`]; on failure [`dhat_last_error_message`] gives a
//! description that stays valid until the next call on the same thread.
//! Arrays are dense row-major `(B, C, H, W)` buffers of `float`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use dhat::attacks::{perturb, AttackConfig, Direction, LossKind};
use dhat::attention::{grad_cam, separate_background, AttentionMap, BackgroundThreshold, MapSource};
use dhat::budget::Budget;
use dhat::losses::{dhat_objective, LogitBundle, LossWeights};
use dhat::models::{build_named, Checkpoint, Classifier, RngState, TrainingStep};
use dhat::Error;
use ndarray::{Array2, Array3, Array4};
use rand_chacha::rand_core::SeedableRng;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    ContractError = 4,
    IoError = 5,
    CheckpointError = 6,
    RuntimeError = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhatLossKind {
    CrossEntropy = 0,
    CwMargin = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhatDirection {
    Adversarial = 0,
    Inverse = 1,
}

/// ℓ∞ attack settings. Radii are in pixel units (`8/255` is `0.0313...`).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DhatAttackParams {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: u32,
    pub loss: DhatLossKind,
    pub direction: DhatDirection,
    pub random_start: bool,
    pub kappa: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DhatLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub omega: f64,
    pub p_norm: f64,
    pub eps_num: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DhatLossTerms {
    pub total: f64,
    pub ce: f64,
    pub dhlr: f64,
    pub floe: f64,
}

/// Opaque classifier handle.
pub struct DhatModel {
    inner: Classifier<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("NUL bytes were replaced"));
}

fn status_of(e: &Error) -> DhatStatus {
    match e {
        Error::Config { .. } | Error::Serde(_) => DhatStatus::ConfigError,
        Error::Contract(_) | Error::Precondition(_) => DhatStatus::ContractError,
        Error::Io { .. } | Error::Ingestion { .. } => DhatStatus::IoError,
        Error::Checkpoint(_) => DhatStatus::CheckpointError,
        Error::Diverged { .. } => DhatStatus::RuntimeError,
    }
}

struct Failure(DhatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DhatStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(DhatStatus::NullPointer, format!("`{name}` is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DhatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DhatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DhatStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const DhatModel) -> Result<&'a Classifier<f32>, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn c_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

fn element_count(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("array dimensions overflow"))
}

unsafe fn images_from(ptr: *const f32, b: usize, c: usize, h: usize, w: usize) -> Result<Array4<f32>, Failure> {
    if ptr.is_null() {
        return Err(null("images"));
    }
    let n = element_count(&[b, c, h, w])?;
    Array4::from_shape_vec((b, c, h, w), slice::from_raw_parts(ptr, n).to_vec()).map_err(|e| invalid(e.to_string()))
}

unsafe fn labels_from(ptr: *const u32, b: usize) -> Result<Vec<usize>, Failure> {
    if ptr.is_null() {
        return Err(null("labels"));
    }
    Ok(slice::from_raw_parts(ptr, b).iter().map(|&y| y as usize).collect())
}

unsafe fn write_out(out: *mut f32, len: usize, data: impl IntoIterator<Item = f32>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let dst = slice::from_raw_parts_mut(out, len);
    let mut n = 0;
    for (d, v) in dst.iter_mut().zip(data) {
        *d = v;
        n += 1;
    }
    if n != len {
        return Err(invalid("output buffer length does not match the result"));
    }
    Ok(())
}

fn budget(v: f64, name: &str) -> Result<Budget, Failure> {
    Budget::real(v).ok_or_else(|| invalid(format!("`{name}` must be finite and >= 0")))
}

/// Message for the last failed call on this thread; empty after success.
#[no_mangle]
pub extern "C" fn dhat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dhat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised classifier (`"small-cnn"` or `"small-resnet"`).
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_build(
    arch: *const c_char,
    in_channels: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut DhatModel,
) -> DhatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = build_named::<f32>(c_str(arch, "arch")?, in_channels, num_classes, seed)?;
        *out = Box::into_raw(Box::new(DhatModel { inner }));
        Ok(())
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_load(path: *const c_char, out: *mut *mut DhatModel) -> DhatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(DhatModel { inner: ckpt.model()? }));
        Ok(())
    })
}

/// Saves the model as a checkpoint with a zero step counter.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_save(model: *const DhatModel, path: *const c_char) -> DhatStatus {
    guard(|| {
        let m = model_ref(model)?;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ckpt = Checkpoint::from_model(m, TrainingStep::default(), RngState::capture(&rng), "");
        ckpt.save(Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_free(model: *mut DhatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_num_classes(model: *const DhatModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Writes `(B, K)` logits into `logits_out` (length `b * K`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn dhat_model_forward(
    model: *const DhatModel,
    images: *const f32,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    logits_out: *mut f32,
    logits_len: usize,
) -> DhatStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = images_from(images, b, c, h, w)?;
        let z = m.forward(&x)?;
        write_out(logits_out, logits_len, z.iter().copied())
    })
}

/// Runs PGD (or inverse PGD, per `params.direction`) and writes the
/// perturbed images into `out` (same shape as `images`).
///
/// # Safety
/// Buffers must hold `b*c*h*w` floats; `labels` must hold `b` entries.
#[no_mangle]
pub unsafe extern "C" fn dhat_attack(
    model: *const DhatModel,
    images: *const f32,
    labels: *const u32,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    params: *const DhatAttackParams,
    out: *mut f32,
) -> DhatStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let x = images_from(images, b, c, h, w)?;
        let y = labels_from(labels, b)?;
        let cfg = AttackConfig {
            epsilon: budget(p.epsilon, "epsilon")?,
            step_size: budget(p.step_size, "step_size")?,
            iterations: p.iterations as usize,
            loss: match p.loss {
                DhatLossKind::CrossEntropy => LossKind::CrossEntropy,
                DhatLossKind::CwMargin => LossKind::CwMargin,
            },
            direction: match p.direction {
                DhatDirection::Adversarial => Direction::Adversarial,
                DhatDirection::Inverse => Direction::Inverse,
            },
            random_start: p.random_start,
            kappa: p.kappa,
            seed: p.seed,
        };
        let adv = perturb(m, &x, &y, &cfg)?;
        write_out(out, x.len(), adv.iter().copied())
    })
}

/// Grad-CAM maps `(B, H, W)` in `[0, 1]` for the given target classes.
///
/// # Safety
/// `images` holds `b*c*h*w` floats, `labels` `b` entries, `maps_out` `b*h*w`.
#[no_mangle]
pub unsafe extern "C" fn dhat_grad_cam(
    model: *const DhatModel,
    images: *const f32,
    labels: *const u32,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    maps_out: *mut f32,
) -> DhatStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = images_from(images, b, c, h, w)?;
        let y = labels_from(labels, b)?;
        let map = grad_cam(m, &x, &y, MapSource::TrainedModel)?;
        write_out(maps_out, element_count(&[b, h, w])?, map.values.iter().copied())
    })
}

/// Keeps the pixels whose attention is below `omega`, zeroing the rest.
///
/// # Safety
/// `images`/`out` hold `b*c*h*w` floats and `maps` holds `b*h*w`.
#[no_mangle]
pub unsafe extern "C" fn dhat_separate_background(
    images: *const f32,
    maps: *const f32,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    omega: f64,
    out: *mut f32,
) -> DhatStatus {
    guard(|| {
        let x = images_from(images, b, c, h, w)?;
        if maps.is_null() {
            return Err(null("maps"));
        }
        let n = element_count(&[b, h, w])?;
        let values = Array3::from_shape_vec((b, h, w), slice::from_raw_parts(maps, n).to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        let map = AttentionMap {
            values,
            source: MapSource::AuxModel,
            target_class: vec![0; b],
        };
        let kept = separate_background(&x, &map, BackgroundThreshold::new(omega)?)?;
        write_out(out, x.len(), kept.iter().copied())
    })
}

/// Evaluates the combined objective on `(B, K)` logit buffers.
///
/// # Safety
/// Each logit buffer holds `b*k` doubles and `labels` holds `b` entries.
#[no_mangle]
pub unsafe extern "C" fn dhat_objective_terms(
    z_adv: *const f64,
    z_inv: *const f64,
    z_bg: *const f64,
    labels: *const u32,
    b: usize,
    k: usize,
    weights: *const DhatLossWeights,
    out: *mut DhatLossTerms,
) -> DhatStatus {
    guard(|| {
        let n = element_count(&[b, k])?;
        let mat = |p: *const f64, name: &str| -> Result<Array2<f64>, Failure> {
            if p.is_null() {
                return Err(null(name));
            }
            Array2::from_shape_vec((b, k), slice::from_raw_parts(p, n).to_vec()).map_err(|e| invalid(e.to_string()))
        };
        let w = weights.as_ref().ok_or_else(|| null("weights"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let weights = LossWeights {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            omega: BackgroundThreshold::new(w.omega)?,
            p_norm: w.p_norm,
            eps_num: w.eps_num,
            floe_block_background: false,
        };
        weights.validate()?;
        let bundle = LogitBundle::debiased(mat(z_adv, "z_adv")?, mat(z_inv, "z_inv")?, mat(z_bg, "z_bg")?)?;
        let t = dhat_objective(&bundle, &labels_from(labels, b)?, &weights)?;
        *out = DhatLossTerms {
            total: t.total,
            ce: t.ce,
            dhlr: t.dhlr,
            floe: t.floe,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn errors_set_the_message() {
        let mut m: *mut DhatModel = ptr::null_mut();
        let arch = CString::new("resnet-9000").unwrap();
        let s = unsafe { dhat_model_build(arch.as_ptr(), 3, 2, 0, &mut m) };
        assert_eq!(s, DhatStatus::ConfigError);
        assert!(m.is_null());
        let msg = unsafe { CStr::from_ptr(dhat_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("resnet-9000"), "{msg}");
    }
}
