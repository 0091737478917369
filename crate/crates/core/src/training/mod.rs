//! The min-max training loop, its baselines, checkpoint resume and the
//! per-epoch metrics log.

mod metrics;
mod schedule;
mod sgd;

use std::time::Instant;

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{inverse_pgd, linf_distance, pgd, AttackConfig};
use crate::attention::{grad_cam, separate_background, AttentionMap, MapSource};
use crate::config::{ExperimentConfig, Objective, TrainingData};
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::evaluation::{clean_accuracy, robust_accuracy, EVAL_CHUNK};
use crate::losses::{
    dhat_objective_with_grads, standard_at_objective_with_grads, uiat_style_objective_with_grads, LogitBundle,
    LossTerms,
};
use crate::models::{build_classifier, ArchDescriptor, ArchKind, Checkpoint, Classifier, RngState, TrainingStep};

pub use metrics::{EpochRecord, MetricsLog, RunSummary, SUMMARY_SCHEMA_VERSION};
pub use schedule::TrainSchedule;
pub use sgd::Sgd;

/// Slack allowed when spot-checking the ε-ball in `f32`.
const BALL_TOLERANCE: f64 = 1e-6;

/// Loss breakdown of one optimiser step, passed to [`TrainOptions::observer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchReport {
    pub epoch: usize,
    pub batch: usize,
    pub terms: LossTerms,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Where and why a run stopped on a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub message: String,
}

impl Divergence {
    pub fn into_error(self) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            batch: self.batch,
            message: self.message,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final checkpoint, or the last good one if the run diverged.
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    pub divergence: Option<Divergence>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many epochs in total are complete.
    pub stop_after: Option<usize>,
    /// Preloaded data; the config's dataset section is loaded otherwise.
    pub data: Option<&'a TrainingData>,
    /// Pre-trained attention model; trained from the config otherwise.
    pub aux: Option<&'a Classifier<f32>>,
    pub observer: Option<&'a mut dyn FnMut(&BatchReport)>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Baselines trained by [`train_baseline`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    StandardAt,
    UiatStyle { lambda: f64 },
}

struct RunState {
    model: Classifier<f32>,
    sgd: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    global_step: u64,
}

struct Context<'c> {
    objective: Objective,
    schedule: &'c TrainSchedule,
    adversarial: AttackConfig,
    inverse: AttackConfig,
    config: &'c ExperimentConfig,
    data: &'c TrainingData,
    maps: Option<&'c Array3<f32>>,
}

fn arch_for(kind: ArchKind, data: &TrainingData) -> ArchDescriptor {
    ArchDescriptor {
        kind,
        in_channels: data.train.example_shape().0,
        num_classes: data.train.num_classes(),
    }
}

fn check_ball(name: &str, x: &Array4<f32>, out: &Array4<f32>, cfg: &AttackConfig) -> Result<()> {
    let d = linf_distance(x, out);
    if d > cfg.epsilon.value() + BALL_TOLERANCE {
        return Err(Error::contract(format!(
            "{name} example left the ε-ball: distance {d} > {}",
            cfg.epsilon
        )));
    }
    if out.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract(format!("{name} example left [0, 1]")));
    }
    Ok(())
}

fn seeded(cfg: &AttackConfig, step: u64) -> AttackConfig {
    AttackConfig {
        seed: cfg.seed.wrapping_add(step),
        ..*cfg
    }
}

/// One forward/backward pass of the configured objective on a batch.
fn objective_step(
    ctx: &Context,
    model: &Classifier<f32>,
    batch: &LabeledBatch,
    maps: Option<Array3<f32>>,
    step: u64,
    spot_check: bool,
) -> Result<(LossTerms, Vec<ArrayD<f32>>)> {
    let x = batch.images();
    let y = batch.labels();
    let adv_cfg = seeded(&ctx.adversarial, step);
    let inv_cfg = seeded(&ctx.inverse, step);
    let adversarial = || -> Result<Array4<f32>> {
        let out = pgd(model, x, y, &adv_cfg)?;
        if spot_check {
            check_ball("adversarial", x, &out, &adv_cfg)?;
        }
        Ok(out)
    };
    let inverse = || -> Result<Array4<f32>> {
        let out = inverse_pgd(model, x, y, &inv_cfg)?;
        if spot_check {
            check_ball("inverse", x, &out, &inv_cfg)?;
        }
        Ok(out)
    };
    let mut grads = model.zeros_like_params();
    let terms = match ctx.objective {
        Objective::Clean | Objective::StandardAt => {
            let input = if ctx.objective == Objective::Clean { x.clone() } else { adversarial()? };
            let (z, tape) = model.forward_tape(&input)?;
            let (terms, g) = standard_at_objective_with_grads(&z, y)?;
            model.backward(tape, &g.d_adv, Some(&mut grads), false);
            terms
        }
        Objective::UiatStyle { lambda } => {
            let x_adv = adversarial()?;
            let x_inv = inverse()?;
            let z_inv = model.forward(&x_inv)?;
            let (z_adv, tape) = model.forward_tape(&x_adv)?;
            let (terms, g) = uiat_style_objective_with_grads(&z_adv, &z_inv, y, lambda)?;
            model.backward(tape, &g.d_adv, Some(&mut grads), false);
            terms
        }
        Objective::Dhat => {
            let maps = maps.ok_or_else(|| Error::Precondition("DHAT needs attention maps".into()))?;
            let x_adv = adversarial()?;
            let x_inv = inverse()?;
            let map = AttentionMap {
                values: maps,
                source: MapSource::AuxModel,
                target_class: y.to_vec(),
            };
            let x_bg = separate_background(&x_inv, &map, ctx.config.loss.omega)?;
            let stacked = concatenate![Axis(0), x_adv, x_inv, x_bg];
            let (z, tape) = model.forward_tape(&stacked)?;
            let b = y.len();
            let part = |i: usize| z.slice(s![i * b..(i + 1) * b, ..]).to_owned();
            let bundle = LogitBundle::debiased(part(0), part(1), part(2))?;
            let (terms, g) = dhat_objective_with_grads(&bundle, y, &ctx.config.loss)?;
            let zeros = || Array2::zeros((b, z.ncols()));
            let dz = concatenate![
                Axis(0),
                g.d_adv,
                g.d_inv.unwrap_or_else(zeros),
                g.d_bg.unwrap_or_else(zeros)
            ];
            model.backward(tape, &dz, Some(&mut grads), false);
            terms
        }
    };
    Ok((terms, grads))
}

#[derive(Default)]
struct TermSums {
    n: usize,
    total: f64,
    ce: f64,
    dhlr: f64,
    floe: f64,
}

impl TermSums {
    fn add(&mut self, t: &LossTerms, b: usize) {
        let w = b as f64;
        self.n += b;
        self.total += t.total * w;
        self.ce += t.ce * w;
        self.dhlr += t.dhlr * w;
        self.floe += t.floe * w;
    }

    fn mean(&self) -> LossTerms {
        let n = self.n.max(1) as f64;
        LossTerms {
            total: self.total / n,
            ce: self.ce / n,
            dhlr: self.dhlr / n,
            floe: self.floe / n,
        }
    }
}

fn logits_finite(model: &Classifier<f32>, x: &Array4<f32>) -> bool {
    model.forward(x).is_ok_and(|z| z.iter().all(|v| v.is_finite()))
}

fn run_epoch(
    ctx: &Context,
    state: &mut RunState,
    observer: &mut Option<&mut dyn FnMut(&BatchReport)>,
) -> Result<std::result::Result<LossTerms, Divergence>> {
    let epoch = state.epoch;
    let lr = ctx.schedule.lr_at(epoch);
    let train = &ctx.data.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);
    let mut sums = TermSums::default();
    for (b, idx) in order.chunks(ctx.schedule.batch_size).enumerate() {
        let batch = train.select(idx);
        let maps = ctx.maps.map(|m| m.select(Axis(0), idx));
        let diverged = |message: String| Divergence {
            epoch: epoch + 1,
            batch: b,
            message,
        };
        let (terms, grads) = match objective_step(ctx, &state.model, &batch, maps, state.global_step, b == 0) {
            Ok(v) => v,
            Err(e) if !logits_finite(&state.model, batch.images()) => {
                return Ok(Err(diverged(format!("non-finite logits ({e})"))))
            }
            Err(e) => return Err(e),
        };
        if !terms.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Ok(Err(diverged(format!(
                "non-finite loss or gradient (total {}, ce {}, dhlr {}, floe {})",
                terms.total, terms.ce, terms.dhlr, terms.floe
            ))));
        }
        if let Some(obs) = observer.as_mut() {
            obs(&BatchReport {
                epoch: epoch + 1,
                batch: b,
                terms,
                lambda1: ctx.config.loss.lambda1,
                lambda2: ctx.config.loss.lambda2,
            });
        }
        sums.add(&terms, idx.len());
        state.sgd.step(state.model.params_mut(), &grads, lr);
        state.global_step += 1;
    }
    Ok(Ok(sums.mean()))
}

fn checkpoint_of(state: &RunState, hash: &str, aux: Option<&Classifier<f32>>) -> Checkpoint {
    let mut c = Checkpoint::from_model(
        &state.model,
        TrainingStep {
            epoch: state.epoch,
            global_step: state.global_step,
        },
        RngState::capture(&state.rng),
        hash,
    );
    c.momentum = Some(state.sgd.velocity().to_vec());
    c.aux = aux.map(|a| (*a.arch(), a.params().to_vec()));
    c
}

/// Grad-CAM maps of `aux` on every training image for its true label.
pub fn attention_maps_for(aux: &Classifier<f32>, batch: &LabeledBatch) -> Result<Array3<f32>> {
    let (_, _, h, w) = batch.images().dim();
    let mut out = Array3::zeros((batch.len(), h, w));
    for start in (0..batch.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(batch.len());
        let chunk = batch.slice(start..end);
        let map = grad_cam(aux, chunk.images(), chunk.labels(), MapSource::AuxModel)?;
        out.slice_mut(s![start..end, .., ..]).assign(&map.values);
    }
    Ok(out)
}

/// Trains the clean attention model described by `config.aux`.
pub fn train_aux(config: &ExperimentConfig, data: &TrainingData) -> Result<Classifier<f32>> {
    let schedule = &config.aux.schedule;
    let model = build_classifier::<f32>(arch_for(config.aux.arch, data), schedule.seed)?;
    let mut state = RunState {
        sgd: Sgd::new(model.params(), schedule.momentum, schedule.weight_decay),
        model,
        rng: ChaCha8Rng::seed_from_u64(schedule.seed),
        epoch: 0,
        global_step: 0,
    };
    let ctx = Context {
        objective: Objective::Clean,
        schedule,
        adversarial: config.attacks.train_adversarial,
        inverse: config.attacks.train_inverse,
        config,
        data,
        maps: None,
    };
    while state.epoch < schedule.epochs {
        if let Err(d) = run_epoch(&ctx, &mut state, &mut None)? {
            return Err(Error::Diverged {
                epoch: d.epoch,
                batch: d.batch,
                message: format!("attention model: {}", d.message),
            });
        }
        state.epoch += 1;
    }
    Ok(state.model)
}

fn run(
    config: &ExperimentConfig,
    data: &TrainingData,
    mut state: RunState,
    aux: Option<&Classifier<f32>>,
    mut log: MetricsLog,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let hash = config.hash()?;
    let maps = match (config.objective, aux) {
        (Objective::Dhat, Some(a)) => Some(attention_maps_for(a, &data.train)?),
        (Objective::Dhat, None) => return Err(Error::Precondition("DHAT needs an attention model".into())),
        _ => None,
    };
    let ctx = Context {
        objective: config.objective,
        schedule: &config.schedule,
        adversarial: config.attacks.train_adversarial,
        inverse: config.attacks.train_inverse,
        config,
        data,
        maps: maps.as_ref(),
    };
    let stop = opts.stop_after.unwrap_or(usize::MAX).min(config.schedule.epochs);
    let mut observer = opts.observer;
    let mut on_epoch = opts.on_epoch;
    let mut last_good = checkpoint_of(&state, &hash, aux);
    let monitor_train = data.train.truncated(config.monitor.samples);
    let monitor_test = data.test.truncated(config.monitor.samples);
    while state.epoch < stop {
        let started = Instant::now();
        let lr = config.schedule.lr_at(state.epoch);
        let terms = match run_epoch(&ctx, &mut state, &mut observer)? {
            Ok(t) => t,
            Err(d) => {
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    log,
                    divergence: Some(d),
                })
            }
        };
        state.epoch += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            lr,
            loss_total: terms.total,
            loss_ce: terms.ce,
            loss_dhlr: terms.dhlr,
            loss_floe: terms.floe,
            train_clean_acc: clean_accuracy(&state.model, &data.train)?,
            test_clean_acc: clean_accuracy(&state.model, &data.test)?,
            train_robust_acc: robust_accuracy(&state.model, &monitor_train, &config.monitor.attack)?,
            test_robust_acc: robust_accuracy(&state.model, &monitor_test, &config.monitor.attack)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = on_epoch.as_mut() {
            f(&record);
        }
        log.push(record)?;
        last_good = checkpoint_of(&state, &hash, aux);
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        log,
        divergence: None,
    })
}

/// Runs the configured objective from a fresh initialisation. Zero epochs
/// return the initial checkpoint and an empty log.
pub fn train(config: &ExperimentConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let loaded;
    let data = match opts.data {
        Some(d) => d,
        None => {
            loaded = config.dataset.load()?;
            &loaded
        }
    };
    let model = build_classifier::<f32>(arch_for(config.model.arch, data), config.model.seed)?;
    let trained_aux;
    let aux = match (config.objective, opts.aux) {
        (Objective::Dhat, Some(a)) => Some(a),
        (Objective::Dhat, None) => {
            trained_aux = train_aux(config, data)?;
            Some(&trained_aux)
        }
        _ => None,
    };
    let state = RunState {
        sgd: Sgd::new(model.params(), config.schedule.momentum, config.schedule.weight_decay),
        model,
        rng: ChaCha8Rng::seed_from_u64(config.schedule.seed),
        epoch: 0,
        global_step: 0,
    };
    run(config, data, state, aux, MetricsLog::new(), opts)
}

/// [`train`] with a baseline objective substituted.
pub fn train_baseline(config: &ExperimentConfig, variant: Baseline, opts: TrainOptions) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.objective = match variant {
        Baseline::StandardAt => Objective::StandardAt,
        Baseline::UiatStyle { lambda } => Objective::UiatStyle { lambda },
    };
    train(&cfg, opts)
}

/// Continues a run from `checkpoint`. The checkpoint must come from the same
/// config (by hash) and `prior` must hold its completed epochs.
pub fn resume(checkpoint: Checkpoint, prior: MetricsLog, config: &ExperimentConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let hash = config.hash()?;
    if checkpoint.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by config {} but the current config hashes to {hash}; \
             resuming would mix two different runs",
            checkpoint.config_hash
        )));
    }
    if prior.len() != checkpoint.step.epoch {
        return Err(Error::Checkpoint(format!(
            "metrics log has {} epochs but the checkpoint is at epoch {}",
            prior.len(),
            checkpoint.step.epoch
        )));
    }
    if checkpoint.step.epoch >= config.schedule.epochs {
        return Ok(TrainOutcome {
            checkpoint,
            log: prior,
            divergence: None,
        });
    }
    let loaded;
    let data = match opts.data {
        Some(d) => d,
        None => {
            loaded = config.dataset.load()?;
            &loaded
        }
    };
    let model = checkpoint.model()?;
    let momentum = checkpoint
        .momentum
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimiser state to resume from".into()))?;
    let sgd = Sgd::new(model.params(), config.schedule.momentum, config.schedule.weight_decay).with_velocity(momentum);
    let aux = checkpoint.aux_model()?;
    if config.objective == Objective::Dhat && aux.is_none() {
        return Err(Error::Checkpoint("DHAT checkpoint is missing its attention model".into()));
    }
    let state = RunState {
        model,
        sgd,
        rng: checkpoint.rng.restore()?,
        epoch: checkpoint.step.epoch,
        global_step: checkpoint.step.global_step,
    };
    let opts = TrainOptions { aux: None, ..opts };
    run(config, data, state, aux.as_ref(), prior, opts)
}
