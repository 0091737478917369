//! Debiased logit construction, the DHLR and FLOE regularizers, and the
//! objectives built from them.
//!
//! Every objective comes in two forms: a value-only function and a
//! `*_with_grads` variant that also returns gradients with respect to each
//! logit block, which the trainer back-propagates through the classifier.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::BackgroundThreshold;
use crate::error::{Error, Result};
use crate::real::Real;

/// Logits gathered for one batch.
///
/// Baselines that do not separate the background leave `z_bg` and
/// `z_debiased` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle<T> {
    pub z_adv: Array2<T>,
    pub z_inv: Option<Array2<T>>,
    pub z_bg: Option<Array2<T>>,
    pub z_debiased: Option<Array2<T>>,
}

impl<T: Real> LogitBundle<T> {
    pub fn adversarial_only(z_adv: Array2<T>) -> Result<Self> {
        ensure_finite("z_adv", z_adv.view())?;
        Ok(LogitBundle {
            z_adv,
            z_inv: None,
            z_bg: None,
            z_debiased: None,
        })
    }

    pub fn with_inverse(z_adv: Array2<T>, z_inv: Array2<T>) -> Result<Self> {
        same_shape("z_adv", &z_adv, "z_inv", &z_inv)?;
        ensure_finite("z_adv", z_adv.view())?;
        ensure_finite("z_inv", z_inv.view())?;
        Ok(LogitBundle {
            z_adv,
            z_inv: Some(z_inv),
            z_bg: None,
            z_debiased: None,
        })
    }

    /// Full bundle; the debiased logits are derived here so the construction
    /// invariant `z_debiased = z_inv - z_bg` always holds.
    pub fn debiased(z_adv: Array2<T>, z_inv: Array2<T>, z_bg: Array2<T>) -> Result<Self> {
        same_shape("z_adv", &z_adv, "z_inv", &z_inv)?;
        ensure_finite("z_adv", z_adv.view())?;
        ensure_finite("z_inv", z_inv.view())?;
        ensure_finite("z_bg", z_bg.view())?;
        let z_deb = debias_logits(&z_inv, &z_bg)?;
        Ok(LogitBundle {
            z_adv,
            z_inv: Some(z_inv),
            z_bg: Some(z_bg),
            z_debiased: Some(z_deb),
        })
    }
}

/// Regularizer weights and switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub omega: BackgroundThreshold,
    #[serde(default = "default_p_norm")]
    pub p_norm: f64,
    #[serde(default = "default_eps_num")]
    pub eps_num: f64,
    /// Stop the FLOE gradient from reaching the background logits.
    #[serde(default)]
    pub floe_block_background: bool,
}

fn default_p_norm() -> f64 {
    2.0
}

fn default_eps_num() -> f64 {
    1e-12
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            omega: BackgroundThreshold::default(),
            p_norm: default_p_norm(),
            eps_num: default_eps_num(),
            floe_block_background: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config("loss.lambda1", "must be a finite value >= 0"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config("loss.lambda2", "must be a finite value >= 0"));
        }
        BackgroundThreshold::new(self.omega.value())
            .map_err(|_| Error::config("loss.omega", "must lie strictly between 0 and 1"))?;
        if !(self.p_norm >= 1.0 && self.p_norm.is_finite()) {
            return Err(Error::config("loss.p_norm", "must be a finite value >= 1"));
        }
        if !(self.eps_num > 0.0 && self.eps_num.is_finite()) {
            return Err(Error::config("loss.eps_num", "must be positive"));
        }
        Ok(())
    }
}

/// Per-batch objective breakdown, always reported in `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub dhlr: f64,
    pub floe: f64,
}

/// Gradients of an objective with respect to each logit block.
#[derive(Debug, Clone)]
pub struct LogitGrads<T> {
    pub d_adv: Array2<T>,
    pub d_inv: Option<Array2<T>>,
    pub d_bg: Option<Array2<T>>,
}

fn same_shape<T>(a_name: &str, a: &Array2<T>, b_name: &str, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "{a_name} has shape {:?} but {b_name} has shape {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn ensure_finite<T: Real>(name: &str, z: ArrayView2<T>) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} contains non-finite values")))
    }
}

fn batch_len<T>(z: &Array2<T>) -> Result<usize> {
    match z.nrows() {
        0 => Err(Error::contract("empty batch")),
        n => Ok(n),
    }
}

fn log_softmax_row<T: Real>(row: ArrayView1<T>) -> Array1<T> {
    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.mapv(|v| (v - max).exp()).sum().ln() + max;
    row.mapv(|v| v - lse)
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax<T: Real>(z: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(z.raw_dim());
    for (mut o, r) in out.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))) {
        o.assign(&log_softmax_row(r));
    }
    out
}

pub fn softmax<T: Real>(z: &Array2<T>) -> Array2<T> {
    log_softmax(z).mapv(|v| v.exp())
}

fn check_labels(labels: &[usize], b: usize, k: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Real>(z: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let b = batch_len(z)?;
    check_labels(labels, b, z.ncols())?;
    ensure_finite("logits", z.view())?;
    let ls = log_softmax(z);
    let bt = T::from_usize(b).unwrap();
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -ls[[i, y]])
        .sum::<T>()
        / bt;
    let mut grad = ls.mapv(|v| v.exp());
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|v| v / bt);
    Ok((loss, grad))
}

pub fn cross_entropy<T: Real>(z: &Array2<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_with_grad(z, labels).map(|(l, _)| l)
}

/// `ž* = ž − ž_(S)`.
pub fn debias_logits<T: Real>(z_inv: &Array2<T>, z_bg: &Array2<T>) -> Result<Array2<T>> {
    same_shape("z_inv", z_inv, "z_bg", z_bg)?;
    Ok(z_inv - z_bg)
}

/// Per-example `KL(softmax(target) || softmax(z))`.
pub fn kl_divergence_rows<T: Real>(target: &Array2<T>, z: &Array2<T>) -> Result<Array1<T>> {
    same_shape("target", target, "logits", z)?;
    let lp = log_softmax(target);
    let lq = log_softmax(z);
    let mut out = Array1::zeros(z.nrows());
    Zip::from(&mut out)
        .and(lp.axis_iter(Axis(0)))
        .and(lq.axis_iter(Axis(0)))
        .for_each(|o, p, q| {
            let kl = p
                .iter()
                .zip(q.iter())
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum::<T>();
            // rounding can leave a tiny negative residue when p == q
            *o = kl.max(T::zero());
        });
    Ok(out)
}

/// Mean KL with the target distribution treated as a constant; the gradient
/// flows into `z` only.
pub fn kl_with_grad<T: Real>(target: &Array2<T>, z: &Array2<T>) -> Result<(T, Array2<T>)> {
    let b = batch_len(z)?;
    ensure_finite("target logits", target.view())?;
    ensure_finite("logits", z.view())?;
    let kl = kl_divergence_rows(target, z)?;
    let bt = T::from_usize(b).unwrap();
    let grad = (softmax(z) - softmax(target)).mapv(|v| v / bt);
    Ok((kl.sum() / bt, grad))
}

/// DHLR: mean `KL(softmax(ž*) || softmax(ẑ))` with a gradient-blocked target.
pub fn dhlr_loss<T: Real>(z_debiased: &Array2<T>, z_adv: &Array2<T>) -> Result<T> {
    dhlr_loss_with_grad(z_debiased, z_adv).map(|(l, _)| l)
}

pub fn dhlr_loss_with_grad<T: Real>(z_debiased: &Array2<T>, z_adv: &Array2<T>) -> Result<(T, Array2<T>)> {
    kl_with_grad(z_debiased, z_adv)
}

fn p_norm<T: Real>(r: ArrayView1<T>, p: T) -> T {
    if p == T::one() {
        return r.iter().map(|v| v.abs()).sum();
    }
    if p == T::from_f64_lossy(2.0) {
        return r.iter().map(|&v| v * v).sum::<T>().sqrt();
    }
    r.iter().map(|v| v.abs().powf(p)).sum::<T>().powf(T::one() / p)
}

/// Residual of `ž` after removing its projection onto `ž_(S)`, row by row.
pub fn floe_residuals<T: Real>(z_inv: &Array2<T>, z_bg: &Array2<T>, eps_num: T) -> Result<Array2<T>> {
    same_shape("z_inv", z_inv, "z_bg", z_bg)?;
    let mut r = z_inv.clone();
    for ((mut r, z), s) in r
        .axis_iter_mut(Axis(0))
        .zip(z_inv.axis_iter(Axis(0)))
        .zip(z_bg.axis_iter(Axis(0)))
    {
        let c = z.dot(&s) / (s.dot(&s) + eps_num);
        r.zip_mut_with(&s, |r, &s| *r -= c * s);
    }
    Ok(r)
}

/// FLOE: mean p-norm of the projection residual.
pub fn floe_loss<T: Real>(z_inv: &Array2<T>, z_bg: &Array2<T>, p: T, eps_num: T) -> Result<T> {
    floe_loss_with_grads(z_inv, z_bg, p, eps_num).map(|(l, _, _)| l)
}

/// FLOE value and gradients with respect to `ž` and `ž_(S)`.
pub fn floe_loss_with_grads<T: Real>(
    z_inv: &Array2<T>,
    z_bg: &Array2<T>,
    p: T,
    eps_num: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let b = batch_len(z_inv)?;
    same_shape("z_inv", z_inv, "z_bg", z_bg)?;
    ensure_finite("z_inv", z_inv.view())?;
    ensure_finite("z_bg", z_bg.view())?;
    if !(p >= T::one()) || !(eps_num > T::zero()) {
        return Err(Error::contract("FLOE needs p >= 1 and eps_num > 0"));
    }
    let bt = T::from_usize(b).unwrap();
    let mut total = T::zero();
    let mut d_inv = Array2::zeros(z_inv.raw_dim());
    let mut d_bg = Array2::zeros(z_bg.raw_dim());
    for i in 0..b {
        let z = z_inv.row(i);
        let s = z_bg.row(i);
        let n = s.dot(&s) + eps_num;
        let a = z.dot(&s);
        let c = a / n;
        let r = &z - &s.mapv(|v| v * c);
        let norm = p_norm(r.view(), p);
        total += norm;
        if norm <= T::zero() {
            continue;
        }
        // d|r|_p / dr
        let g = if p == T::one() {
            r.mapv(|v| v.sign0())
        } else {
            let denom = norm.powf(p - T::one());
            r.mapv(|v| v.sign0() * v.abs().powf(p - T::one()) / denom)
        };
        let gs = g.dot(&s);
        let two = T::from_f64_lossy(2.0);
        let mut dz = d_inv.row_mut(i);
        Zip::from(&mut dz)
            .and(&g)
            .and(&s)
            .for_each(|d, &g, &s| *d = (g - gs / n * s) / bt);
        let mut ds = d_bg.row_mut(i);
        Zip::from(&mut ds)
            .and(&g)
            .and(&z)
            .and(&s)
            .for_each(|d, &g, &z, &s| *d = (-c * g - gs * (z / n - two * a * s / (n * n))) / bt);
    }
    Ok((total / bt, d_inv, d_bg))
}

/// Combined objective `CE(ẑ, y) + λ1·DHLR(ž*, ẑ) + λ2·FLOE(ž, ž_(S))`.
pub fn dhat_objective<T: Real>(bundle: &LogitBundle<T>, labels: &[usize], w: &LossWeights) -> Result<LossTerms> {
    dhat_objective_with_grads(bundle, labels, w).map(|(t, _)| t)
}

pub fn dhat_objective_with_grads<T: Real>(
    bundle: &LogitBundle<T>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(LossTerms, LogitGrads<T>)> {
    let (Some(z_inv), Some(z_bg), Some(z_deb)) = (&bundle.z_inv, &bundle.z_bg, &bundle.z_debiased) else {
        return Err(Error::contract(
            "DHAT objective needs inverse, background and debiased logits",
        ));
    };
    let (ce, mut d_adv) = cross_entropy_with_grad(&bundle.z_adv, labels)?;
    let (dhlr, d_kl) = dhlr_loss_with_grad(z_deb, &bundle.z_adv)?;
    let (floe, d_inv, d_bg) = floe_loss_with_grads(
        z_inv,
        z_bg,
        T::from_f64_lossy(w.p_norm),
        T::from_f64_lossy(w.eps_num),
    )?;
    let l1 = T::from_f64_lossy(w.lambda1);
    let l2 = T::from_f64_lossy(w.lambda2);
    d_adv.zip_mut_with(&d_kl, |d, &k| *d += l1 * k);
    let d_inv = d_inv.mapv(|v| v * l2);
    let d_bg = if w.floe_block_background {
        Array2::zeros(z_bg.raw_dim())
    } else {
        d_bg.mapv(|v| v * l2)
    };
    let (ce, dhlr, floe) = (ce.to_f64_lossy(), dhlr.to_f64_lossy(), floe.to_f64_lossy());
    Ok((
        LossTerms {
            total: ce + w.lambda1 * dhlr + w.lambda2 * floe,
            ce,
            dhlr,
            floe,
        },
        LogitGrads {
            d_adv,
            d_inv: Some(d_inv),
            d_bg: Some(d_bg),
        },
    ))
}

/// UIAT-style baseline `CE(ẑ, y) + λ·KL(softmax(ž) || softmax(ẑ))`, target
/// gradient-blocked. The KL term is reported in the `dhlr` slot.
pub fn uiat_style_objective<T: Real>(
    z_adv: &Array2<T>,
    z_inv: &Array2<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<T> {
    uiat_style_objective_with_grads(z_adv, z_inv, labels, lambda)
        .map(|(t, _)| T::from_f64_lossy(t.total))
}

pub fn uiat_style_objective_with_grads<T: Real>(
    z_adv: &Array2<T>,
    z_inv: &Array2<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<(LossTerms, LogitGrads<T>)> {
    if !(lambda >= 0.0) {
        return Err(Error::config("loss.uiat_lambda", "must be >= 0"));
    }
    let (ce, mut d_adv) = cross_entropy_with_grad(z_adv, labels)?;
    let (kl, d_kl) = kl_with_grad(z_inv, z_adv)?;
    let l = T::from_f64_lossy(lambda);
    d_adv.zip_mut_with(&d_kl, |d, &k| *d += l * k);
    let (ce, kl) = (ce.to_f64_lossy(), kl.to_f64_lossy());
    Ok((
        LossTerms {
            total: ce + lambda * kl,
            ce,
            dhlr: kl,
            floe: 0.0,
        },
        LogitGrads {
            d_adv,
            d_inv: None,
            d_bg: None,
        },
    ))
}

/// Plain adversarial cross-entropy.
pub fn standard_at_objective_with_grads<T: Real>(
    z_adv: &Array2<T>,
    labels: &[usize],
) -> Result<(LossTerms, LogitGrads<T>)> {
    let (ce, d_adv) = cross_entropy_with_grad(z_adv, labels)?;
    let ce = ce.to_f64_lossy();
    Ok((
        LossTerms {
            total: ce,
            ce,
            dhlr: 0.0,
            floe: 0.0,
        },
        LogitGrads {
            d_adv,
            d_inv: None,
            d_bg: None,
        },
    ))
}
