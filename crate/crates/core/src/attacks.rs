//! ℓ∞ sign-gradient attacks: FGSM, PGD and the inverse (loss-descending)
//! variant that produces high-confidence examples.

use ndarray::{Array1, Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::models::Differentiable;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    CwMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Ascend the attack loss.
    #[default]
    Adversarial,
    /// Descend the attack loss.
    Inverse,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Adversarial => "adversarial",
            Direction::Inverse => "inverse",
        }
    }
}

/// ℓ∞ attack settings. Outputs are always clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: Budget,
    pub step_size: Budget,
    pub iterations: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub random_start: bool,
    /// Confidence margin for the CW loss.
    #[serde(default)]
    pub kappa: f64,
    /// Seed for the random start.
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// PGD with `ε = eps/255`, `η = step/255`.
    pub fn pgd(eps_255: u32, step_255: u32, iterations: usize) -> Self {
        AttackConfig {
            epsilon: Budget::over_255(eps_255),
            step_size: Budget::over_255(step_255),
            iterations,
            loss: LossKind::CrossEntropy,
            direction: Direction::Adversarial,
            random_start: false,
            kappa: 0.0,
            seed: 0,
        }
    }

    pub fn inverse(eps_255: u32, step_255: u32, iterations: usize) -> Self {
        AttackConfig {
            direction: Direction::Inverse,
            ..Self::pgd(eps_255, step_255, iterations)
        }
    }

    pub fn with_epsilon(self, epsilon: Budget) -> Self {
        AttackConfig { epsilon, ..self }
    }

    /// Short label such as `pgd-10` or `cw-30` or `inv-pgd-10`.
    pub fn label(&self) -> String {
        let base = match self.loss {
            LossKind::CrossEntropy => "pgd",
            LossKind::CwMargin => "cw",
        };
        let prefix = match self.direction {
            Direction::Adversarial => "",
            Direction::Inverse => "inv-",
        };
        format!("{prefix}{base}-{}@{}", self.iterations, self.epsilon)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.step_size.value() > 0.0) {
            return Err(Error::config(format!("{field}.step_size"), "must be > 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config(format!("{field}.iterations"), "must be >= 1"));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::config(format!("{field}.kappa"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

fn check_batch<T: Real>(images: &Array4<T>, labels: &[usize], k: usize) -> Result<()> {
    if images.dim().0 != labels.len() {
        return Err(Error::contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            images.dim().0
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Margin `z_y − max_{k≠y} z_k` per example.
pub fn cw_margins<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<Array1<T>> {
    let (b, k) = logits.dim();
    if k < 2 {
        return Err(Error::contract("CW margin needs at least 2 classes"));
    }
    if labels.len() != b {
        return Err(Error::contract("label count does not match logits"));
    }
    Ok(Array1::from_iter(labels.iter().enumerate().map(|(i, &y)| {
        let row = logits.row(i);
        let other = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
        row[y] - other
    })))
}

/// CW margin loss in the attacker's ascent convention:
/// `−max(z_y − max_{k≠y} z_k, −κ)`. Ascending it shrinks the true-class
/// margin.
pub fn cw_margin_loss<T: Real>(logits: &Array2<T>, labels: &[usize], kappa: f64) -> Result<Array1<T>> {
    let kappa = T::from_f64_lossy(kappa);
    Ok(cw_margins(logits, labels)?.mapv(|m| -m.max(-kappa)))
}

/// Gradient of the summed per-example attack loss with respect to logits.
fn attack_loss_grad<T: Real>(z: &Array2<T>, labels: &[usize], loss: LossKind, kappa: f64) -> Array2<T> {
    match loss {
        LossKind::CrossEntropy => {
            let mut g = softmax(z);
            for (i, &y) in labels.iter().enumerate() {
                g[[i, y]] -= T::one();
            }
            g
        }
        LossKind::CwMargin => {
            let kappa = T::from_f64_lossy(kappa);
            let mut g = Array2::zeros(z.raw_dim());
            for (i, &y) in labels.iter().enumerate() {
                let row = z.row(i);
                let (j, &other) = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .fold((usize::MAX, &T::neg_infinity()), |best, cur| {
                        if *cur.1 > *best.1 {
                            cur
                        } else {
                            best
                        }
                    });
                if row[y] - other > -kappa {
                    g[[i, y]] = -T::one();
                    g[[i, j]] = T::one();
                }
            }
            g
        }
    }
}

fn input_sign_gradient<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    let (_, g) = model.input_gradient(x, &mut |z| attack_loss_grad(z, labels, cfg.loss, cfg.kappa))?;
    Ok(g.mapv(T::sign0))
}

fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Single signed step `clamp(x + η·sign(∇ₓL))`.
pub fn fgsm<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    images: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    if cfg.iterations != 1 {
        return Err(Error::Precondition("FGSM takes exactly one iteration".into()));
    }
    if cfg.direction != Direction::Adversarial {
        return Err(Error::Precondition("FGSM is an adversarial attack".into()));
    }
    check_batch(images, labels, model.num_classes())?;
    let eta = T::from_f64_lossy(cfg.step_size.value());
    if eta == T::zero() {
        return Ok(images.clone());
    }
    let s = input_sign_gradient(model, images, labels, cfg)?;
    let mut out = images.clone();
    Zip::from(&mut out).and(&s).for_each(|o, &s| *o = clamp01(*o + eta * s));
    Ok(out)
}

fn projected_sign_descent<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    images: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    cfg.validate("attack")?;
    check_batch(images, labels, model.num_classes())?;
    let eps = T::from_f64_lossy(cfg.epsilon.value());
    if eps == T::zero() {
        return Ok(images.clone());
    }
    let eta = T::from_f64_lossy(cfg.step_size.value());
    let dir = match cfg.direction {
        Direction::Adversarial => T::one(),
        Direction::Inverse => -T::one(),
    };
    let lower = images.mapv(|v| v - eps);
    let upper = images.mapv(|v| v + eps);
    let mut x = images.clone();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let e = cfg.epsilon.value();
        x.mapv_inplace(|v| clamp01(v + T::from_f64_lossy(rng.random_range(-e..=e))));
    }
    for _ in 0..cfg.iterations {
        let s = input_sign_gradient(model, &x, labels, cfg)?;
        Zip::from(&mut x)
            .and(&s)
            .and(&lower)
            .and(&upper)
            .for_each(|x, &s, &lo, &hi| {
                *x = clamp01((*x + dir * eta * s).max(lo).min(hi));
            });
    }
    Ok(x)
}

/// `T` steps of `x ← Π_ε(x + η·sign(∇ₓL))`, clamped to `[0, 1]`.
pub fn pgd<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    images: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    if cfg.direction != Direction::Adversarial {
        return Err(Error::Precondition("pgd needs direction = adversarial".into()));
    }
    projected_sign_descent(model, images, labels, cfg)
}

/// PGD stepping against the gradient: the inverse-adversarial example.
pub fn inverse_pgd<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    images: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    if cfg.direction != Direction::Inverse {
        return Err(Error::Precondition("inverse_pgd needs direction = inverse".into()));
    }
    projected_sign_descent(model, images, labels, cfg)
}

/// Runs whichever attack `cfg.direction` names.
pub fn perturb<T: Real, M: Differentiable<T> + ?Sized>(
    model: &M,
    images: &Array4<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<T>> {
    projected_sign_descent(model, images, labels, cfg)
}

/// Largest `|out − x|` over all elements, in `f64`.
pub fn linf_distance<T: Real>(a: &Array4<T>, b: &Array4<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .fold(0.0, f64::max)
}
