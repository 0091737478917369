//! Clean and robust accuracy, the train/test robust gap, transfer attacks
//! and attention-region diagnostics.

mod report;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb, AttackConfig, Direction};
use crate::attention::{attention_region_iou, grad_cam, MapSource};
use crate::budget::Budget;
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::models::{Classifier, Differentiable};

pub use report::{
    emit_report, load_report, write_attention_pngs, AttackResult, DeltaRow, EvalReport, GapResult, IouCurve,
    RunComparison, RunRow, SignCount,
    TransferEntry, REPORT_FILE, REPORT_SCHEMA_VERSION,
};

/// Examples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

pub fn argmax_rows(z: &Array2<f32>) -> Vec<usize> {
    z.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn correct_fraction(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub fn predict<M: Differentiable<f32> + ?Sized>(model: &M, images: &Array4<f32>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.dim().0);
    for chunk in images.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        out.extend(argmax_rows(&model.logits(&chunk.to_owned())?));
    }
    Ok(out)
}

pub fn clean_accuracy<M: Differentiable<f32> + ?Sized>(model: &M, batch: &LabeledBatch) -> Result<f64> {
    Ok(correct_fraction(&predict(model, batch.images())?, batch.labels()))
}

fn check_classes<M: Differentiable<f32> + ?Sized>(model: &M, batch: &LabeledBatch) -> Result<()> {
    if model.num_classes() != batch.num_classes() {
        return Err(Error::contract(format!(
            "model has {} classes but the data has {}",
            model.num_classes(),
            batch.num_classes()
        )));
    }
    Ok(())
}

/// Accuracy of `target` on adversarial examples crafted against `source`.
pub fn transfer_attack_eval<S, M>(source: &S, target: &M, batch: &LabeledBatch, attack: &AttackConfig) -> Result<f64>
where
    S: Differentiable<f32> + ?Sized,
    M: Differentiable<f32> + ?Sized,
{
    if attack.direction != Direction::Adversarial {
        return Err(Error::Precondition("robust accuracy needs an adversarial attack".into()));
    }
    check_classes(source, batch)?;
    check_classes(target, batch)?;
    let mut correct = 0usize;
    for (start, chunk) in (0..batch.len()).step_by(EVAL_CHUNK).map(|s| (s, batch.slice(s..(s + EVAL_CHUNK).min(batch.len())))) {
        let mut cfg = *attack;
        cfg.seed = cfg.seed.wrapping_add(start as u64);
        let adv = perturb(source, chunk.images(), chunk.labels(), &cfg)?;
        let pred = argmax_rows(&target.logits(&adv)?);
        correct += pred.iter().zip(chunk.labels()).filter(|(p, y)| p == y).count();
    }
    Ok(if batch.is_empty() { 0.0 } else { correct as f64 / batch.len() as f64 })
}

/// White-box accuracy under `attack`.
pub fn robust_accuracy<M: Differentiable<f32> + ?Sized>(model: &M, batch: &LabeledBatch, attack: &AttackConfig) -> Result<f64> {
    transfer_attack_eval(model, model, batch, attack)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustGap {
    pub train_robust_acc: f64,
    pub test_robust_acc: f64,
    /// `train_robust_acc − test_robust_acc`; may be negative.
    pub gap: f64,
}

pub fn robust_gap<M: Differentiable<f32> + ?Sized>(
    model: &M,
    train: &LabeledBatch,
    test: &LabeledBatch,
    attack: &AttackConfig,
) -> Result<RobustGap> {
    let train_robust_acc = robust_accuracy(model, train, attack)?;
    let test_robust_acc = robust_accuracy(model, test, attack)?;
    Ok(RobustGap {
        train_robust_acc,
        test_robust_acc,
        gap: train_robust_acc - test_robust_acc,
    })
}

/// Mean foreground and background IoU of a model's own attention at one radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouPoint {
    pub epsilon: Budget,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

/// For each radius, perturbs the batch against `model` in `direction`,
/// computes the model's Grad-CAM on the result for the true labels, and
/// scores it against the foreground masks and their complements.
pub fn attention_bias_sweep(
    model: &Classifier<f32>,
    batch: &LabeledBatch,
    epsilons: &[Budget],
    direction: Direction,
    template: &AttackConfig,
    bin_threshold: f32,
) -> Result<Vec<IouPoint>> {
    let masks = batch
        .fg_masks()
        .ok_or_else(|| Error::Precondition("attention sweep needs foreground masks".into()))?;
    check_classes(model, batch)?;
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = AttackConfig {
            epsilon: eps,
            direction,
            ..*template
        };
        let (mut fg_sum, mut bg_sum) = (0.0, 0.0);
        for start in (0..batch.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(batch.len());
            let chunk = batch.slice(start..end);
            let x = perturb(model, chunk.images(), chunk.labels(), &cfg)?;
            let map = grad_cam(model, &x, chunk.labels(), MapSource::TrainedModel)?;
            let fg = masks.slice(ndarray::s![start..end, .., ..]).to_owned();
            let bg = fg.mapv(|v| 1 - v);
            fg_sum += attention_region_iou(&map, &fg, bin_threshold)?.iter().sum::<f64>();
            bg_sum += attention_region_iou(&map, &bg, bin_threshold)?.iter().sum::<f64>();
        }
        let n = batch.len().max(1) as f64;
        points.push(IouPoint {
            epsilon: eps,
            fg_iou: fg_sum / n,
            bg_iou: bg_sum / n,
        });
    }
    Ok(points)
}

/// Provenance copied into a report.
#[derive(Debug, Clone, Default)]
pub struct ReportContext {
    pub checkpoint_digest: String,
    pub config_hash: String,
    pub objective: Option<String>,
    pub seed: Option<u64>,
    pub experiment_config: Option<crate::config::ExperimentConfig>,
}

/// Runs the whole evaluation suite described by `cfg`. Attacks with a zero
/// radius are skipped since they reduce to clean accuracy.
pub fn evaluate(
    model: &Classifier<f32>,
    train: &LabeledBatch,
    test: &LabeledBatch,
    cfg: &crate::config::EvalConfig,
    transfer_sources: &[(String, Classifier<f32>)],
    ctx: ReportContext,
) -> Result<EvalReport> {
    cfg.validate()?;
    let limit = cfg.max_examples.unwrap_or(usize::MAX);
    let (train, test) = (train.truncated(limit), test.truncated(limit));
    let mut robust = Vec::new();
    for a in cfg.attacks.iter().filter(|a| !a.epsilon.is_zero()) {
        robust.push(AttackResult {
            label: a.label(),
            attack: *a,
            test_robust_acc: robust_accuracy(model, &test, a)?,
        });
    }
    let robust_gap = if cfg.gap_attack.epsilon.is_zero() {
        None
    } else {
        Some(report::GapResult {
            attack: cfg.gap_attack.label(),
            gap: robust_gap(model, &train, &test, &cfg.gap_attack)?,
        })
    };
    let mut iou = Vec::new();
    if test.fg_masks().is_some() && !cfg.iou_epsilons.is_empty() {
        for &direction in &cfg.iou_directions {
            iou.push(IouCurve {
                direction,
                points: attention_bias_sweep(
                    model,
                    &test,
                    &cfg.iou_epsilons,
                    direction,
                    &cfg.iou_attack,
                    cfg.iou_bin_threshold,
                )?,
            });
        }
    }
    let mut transfer = Vec::new();
    if !cfg.gap_attack.epsilon.is_zero() {
        for (name, source) in transfer_sources {
            transfer.push(TransferEntry {
                source: name.clone(),
                attack: cfg.gap_attack.label(),
                accuracy: transfer_attack_eval(source, model, &test, &cfg.gap_attack)?,
            });
        }
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint_digest: ctx.checkpoint_digest,
        config_hash: ctx.config_hash,
        objective: ctx.objective,
        seed: ctx.seed,
        train_examples: train.len(),
        test_examples: test.len(),
        clean_acc: clean_accuracy(model, &test)?,
        train_clean_acc: clean_accuracy(model, &train)?,
        robust,
        robust_gap,
        iou,
        iou_bin_threshold: cfg.iou_bin_threshold,
        transfer,
        eval_config: cfg.clone(),
        experiment_config: ctx.experiment_config,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_spurious_dataset, SpuriousSpec};
    use crate::models::build_named;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_batch(n: usize, k: usize, size: usize, seed: u64) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_simple_fn((n, 3, size, size), || rng.random::<f32>());
        LabeledBatch::new(images, (0..n).map(|i| i % k).collect(), None, k).unwrap()
    }

    fn spurious(n: usize) -> LabeledBatch {
        let spec = SpuriousSpec {
            num_classes: 2,
            image_size: 16,
            train_correlation: 0.9,
            test_correlation: 0.5,
            train_samples: n,
            test_samples: n,
            seed: 3,
        };
        generate_spurious_dataset(&spec).unwrap().test
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let z = array![[0.1f32, 0.9, 0.9], [2.0, -1.0, 0.0], [f32::NAN, 0.0, 1.0]];
        assert_eq!(argmax_rows(&z), vec![1, 0, 2]);
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let k = 4;
        let batch = noise_batch(1200, k, 16, 7);
        let model = build_named::<f32>("small-cnn", 3, k, 11).unwrap();
        let acc = clean_accuracy(&model, &batch).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / batch.len() as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn zero_radius_attack_matches_clean_accuracy() {
        let batch = spurious(300);
        let model = build_named::<f32>("small-cnn", 3, 2, 1).unwrap();
        let clean = clean_accuracy(&model, &batch).unwrap();
        let zero = AttackConfig::pgd(0, 2, 10);
        assert_eq!(robust_accuracy(&model, &batch, &zero).unwrap(), clean);
        let other = build_named::<f32>("small-cnn", 3, 2, 2).unwrap();
        assert_eq!(transfer_attack_eval(&other, &model, &batch, &zero).unwrap(), clean);
    }

    #[test]
    fn self_transfer_equals_white_box() {
        let batch = spurious(300);
        let model = build_named::<f32>("small-cnn", 3, 2, 4).unwrap();
        let attack = AttackConfig::pgd(8, 2, 5);
        assert_eq!(
            transfer_attack_eval(&model, &model, &batch, &attack).unwrap(),
            robust_accuracy(&model, &batch, &attack).unwrap()
        );
    }

    #[test]
    fn gap_is_difference_and_vanishes_on_identical_splits() {
        let batch = spurious(200);
        let model = build_named::<f32>("small-cnn", 3, 2, 5).unwrap();
        let attack = AttackConfig::pgd(8, 2, 3);
        let same = robust_gap(&model, &batch, &batch, &attack).unwrap();
        assert_eq!(same.gap, 0.0);
        let other = noise_batch(200, 2, 16, 1);
        let g = robust_gap(&model, &batch, &other, &attack).unwrap();
        assert!((g.gap - (g.train_robust_acc - g.test_robust_acc)).abs() < 1e-9);
        for v in [g.train_robust_acc, g.test_robust_acc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn class_mismatch_and_inverse_attack_are_rejected() {
        let batch = spurious(20);
        let model = build_named::<f32>("small-cnn", 3, 3, 0).unwrap();
        assert!(matches!(
            robust_accuracy(&model, &batch, &AttackConfig::pgd(8, 2, 1)),
            Err(Error::Contract(_))
        ));
        let model = build_named::<f32>("small-cnn", 3, 2, 0).unwrap();
        assert!(matches!(
            robust_accuracy(&model, &batch, &AttackConfig::inverse(4, 2, 1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn sweep_at_zero_radius_ignores_direction() {
        let batch = spurious(64);
        let model = build_named::<f32>("small-cnn", 3, 2, 6).unwrap();
        let template = AttackConfig::pgd(8, 2, 3);
        let eps = [Budget::ZERO, Budget::over_255(4)];
        let adv = attention_bias_sweep(&model, &batch, &eps, Direction::Adversarial, &template, 0.5).unwrap();
        let inv = attention_bias_sweep(&model, &batch, &eps, Direction::Inverse, &template, 0.5).unwrap();
        assert_eq!(adv[0], inv[0]);
        for p in adv.iter().chain(&inv) {
            assert!((0.0..=1.0).contains(&p.fg_iou) && (0.0..=1.0).contains(&p.bg_iou));
        }
    }

    #[test]
    fn sweep_needs_masks() {
        let batch = noise_batch(4, 2, 16, 0);
        let model = build_named::<f32>("small-cnn", 3, 2, 0).unwrap();
        let r = attention_bias_sweep(&model, &batch, &[Budget::ZERO], Direction::Inverse, &AttackConfig::inverse(4, 2, 1), 0.5);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
