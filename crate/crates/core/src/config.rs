//! Experiment and evaluation configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, Direction};
use crate::attention::BackgroundThreshold;
use crate::data::{
    generate_spurious_dataset, load_exported, load_standard_dataset, DatasetLimits, LabeledBatch, SpuriousSpec,
    StandardDataset,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ArchKind;
use crate::training::TrainSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        spec: SpuriousSpec,
    },
    Standard {
        name: StandardDataset,
        path: PathBuf,
        #[serde(default)]
        limits: DatasetLimits,
    },
    /// A directory written by `gen-data`.
    Exported {
        path: PathBuf,
    },
}

/// Train and test splits ready for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Synthetic { spec } => spec.validate().map_err(|e| prefix_field(e, "dataset.spec")),
            _ => Ok(()),
        }
    }

    pub fn load(&self) -> Result<TrainingData> {
        let (train, test) = match self {
            DatasetConfig::Synthetic { spec } => {
                let d = generate_spurious_dataset(spec).map_err(|e| prefix_field(e, "dataset.spec"))?;
                (d.train, d.test)
            }
            DatasetConfig::Standard { name, path, limits } => {
                let name = match name {
                    StandardDataset::Cifar10 => "cifar10",
                    StandardDataset::Cifar100 => "cifar100",
                };
                load_standard_dataset(path, name, *limits)?
            }
            DatasetConfig::Exported { path } => {
                let (d, _) = load_exported(path)?;
                (d.train, d.test)
            }
        };
        Ok(TrainingData { train, test })
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    #[serde(default)]
    pub seed: u64,
}

/// What the outer minimisation optimises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Objective {
    /// Cross-entropy on natural images.
    Clean,
    /// Cross-entropy on PGD examples.
    StandardAt,
    /// Cross-entropy on PGD examples plus KL towards inverse-example logits.
    UiatStyle { lambda: f64 },
    /// Cross-entropy plus the debiased logit alignment and orthogonality terms.
    Dhat,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Clean => "clean",
            Objective::StandardAt => "standard-at",
            Objective::UiatStyle { .. } => "uiat-style",
            Objective::Dhat => "dhat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub train_adversarial: AttackConfig,
    pub train_inverse: AttackConfig,
    /// Attacks run by `eval` when no eval config overrides them.
    #[serde(default)]
    pub eval: Vec<AttackConfig>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            train_adversarial: AttackConfig::pgd(8, 2, 10),
            train_inverse: AttackConfig::inverse(4, 2, 10),
            eval: vec![AttackConfig::pgd(8, 2, 10)],
        }
    }
}

/// The frozen clean model whose Grad-CAM maps drive background separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub arch: ArchKind,
    pub schedule: TrainSchedule,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            arch: ArchKind::SmallCnn,
            schedule: TrainSchedule {
                epochs: 10,
                base_lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                decay_epochs: vec![],
                decay_factor: 0.1,
                batch_size: 128,
                seed: 0,
            },
        }
    }
}

/// Per-epoch robustness monitoring on a fixed prefix of each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub samples: usize,
    pub attack: AttackConfig,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            samples: 256,
            attack: AttackConfig::pgd(8, 2, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub objective: Objective,
    #[serde(default)]
    pub attacks: AttackSection,
    #[serde(default)]
    pub loss: LossWeights,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub aux: AuxConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::config(origin, e.to_string()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(text, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(&read_text(path)?, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.loss.validate()?;
        self.schedule.validate("schedule")?;
        self.aux.schedule.validate("aux.schedule")?;
        let a = &self.attacks;
        a.train_adversarial.validate("attacks.train_adversarial")?;
        a.train_inverse.validate("attacks.train_inverse")?;
        if a.train_adversarial.direction != Direction::Adversarial {
            return Err(Error::config("attacks.train_adversarial.direction", "must be adversarial"));
        }
        if a.train_inverse.direction != Direction::Inverse {
            return Err(Error::config("attacks.train_inverse.direction", "must be inverse"));
        }
        for (i, e) in a.eval.iter().enumerate() {
            e.validate(&format!("attacks.eval[{i}]"))?;
        }
        self.monitor.attack.validate("monitor.attack")?;
        if let Objective::UiatStyle { lambda } = self.objective {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::config("objective.lambda", "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the run's trajectory. The output
    /// directory is excluded so a run can be moved or resumed elsewhere.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    /// Points every training seed at `seed`. The dataset is left alone so
    /// that seeds vary initialisation and batch order, not the data.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.schedule.seed = seed;
        self.aux.schedule.seed = seed;
    }

    pub fn with_omega(mut self, omega: BackgroundThreshold) -> Self {
        self.loss.omega = omega;
        self
    }
}

/// Settings for `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset to evaluate on; defaults to the one the checkpoint trained on.
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default = "default_eval_attacks")]
    pub attacks: Vec<AttackConfig>,
    /// Attack used for the train/test robust gap.
    #[serde(default = "default_gap_attack")]
    pub gap_attack: AttackConfig,
    /// Radii (in the same notation as attack budgets) for the attention probe.
    #[serde(default)]
    pub iou_epsilons: Vec<crate::budget::Budget>,
    #[serde(default = "default_iou_directions")]
    pub iou_directions: Vec<Direction>,
    /// Step size and iterations of the attention-probe perturbation.
    #[serde(default = "default_gap_attack")]
    pub iou_attack: AttackConfig,
    #[serde(default = "default_bin_threshold")]
    pub iou_bin_threshold: f32,
    /// Other checkpoints used as transfer-attack sources.
    #[serde(default)]
    pub transfer_sources: Vec<PathBuf>,
    /// Evaluate on at most this many examples per split.
    #[serde(default)]
    pub max_examples: Option<usize>,
    /// Number of attention maps exported as PNG.
    #[serde(default = "default_map_exports")]
    pub export_maps: usize,
}

fn default_eval_attacks() -> Vec<AttackConfig> {
    let mut cw = AttackConfig::pgd(8, 2, 30);
    cw.loss = crate::attacks::LossKind::CwMargin;
    vec![
        AttackConfig::pgd(8, 2, 10),
        AttackConfig::pgd(8, 2, 20),
        AttackConfig::pgd(8, 2, 50),
        cw,
    ]
}

fn default_gap_attack() -> AttackConfig {
    AttackConfig::pgd(8, 2, 10)
}

fn default_iou_directions() -> Vec<Direction> {
    vec![Direction::Adversarial, Direction::Inverse]
}

fn default_bin_threshold() -> f32 {
    0.5
}

fn default_map_exports() -> usize {
    8
}

impl Default for EvalConfig {
    fn default() -> Self {
        parse_json("{}", "eval config").expect("defaults parse")
    }
}

impl EvalConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: EvalConfig = parse_json(&read_text(path)?, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate(&format!("attacks[{i}]"))?;
            if a.direction != Direction::Adversarial {
                return Err(Error::config(format!("attacks[{i}].direction"), "evaluation attacks must be adversarial"));
            }
        }
        self.gap_attack.validate("gap_attack")?;
        self.iou_attack.validate("iou_attack")?;
        if !(0.0..=1.0).contains(&self.iou_bin_threshold) {
            return Err(Error::config("iou_bin_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
