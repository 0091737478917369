#![allow(dead_code)]

use dhat::config::{AttackSection, AuxConfig, DatasetConfig, ExperimentConfig, ModelConfig, MonitorConfig, Objective, TrainingData};
use dhat::data::SpuriousSpec;
use dhat::models::ArchKind;
use dhat::training::TrainSchedule;

pub fn tiny_spec(seed: u64) -> SpuriousSpec {
    SpuriousSpec {
        num_classes: 2,
        image_size: 16,
        train_correlation: 0.9,
        test_correlation: 0.5,
        train_samples: 192,
        test_samples: 96,
        seed,
    }
}

/// A config small enough to train in well under a second per epoch.
pub fn tiny_config(objective: Objective, epochs: usize) -> ExperimentConfig {
    let aux = AuxConfig {
        schedule: TrainSchedule::standard(2, 0.05, 64, 0),
        ..Default::default()
    };
    ExperimentConfig {
        seed: 0,
        dataset: DatasetConfig::Synthetic { spec: tiny_spec(0) },
        model: ModelConfig {
            arch: ArchKind::SmallCnn,
            seed: 0,
        },
        objective,
        attacks: AttackSection::default(),
        loss: Default::default(),
        schedule: TrainSchedule::standard(epochs, 0.05, 64, 0),
        aux,
        monitor: MonitorConfig {
            samples: 64,
            attack: dhat::attacks::AttackConfig::pgd(8, 2, 3),
        },
        output_dir: "runs/test".into(),
    }
}

pub fn tiny_data() -> TrainingData {
    DatasetConfig::Synthetic { spec: tiny_spec(0) }.load().unwrap()
}

use dhat::attacks::{Direction, LossKind};
use dhat::budget::Budget;
use dhat::models::Differentiable;
use ndarray::{Array2, Array4};

/// Two-class model with logits `(w·x, 0)`, written independently of the
/// library's network code.
pub struct LinearLogistic {
    pub w: Vec<f64>,
}

impl LinearLogistic {
    pub fn score(&self, x: &Array4<f64>, i: usize) -> f64 {
        x.outer_iter().nth(i).unwrap().iter().zip(&self.w).map(|(a, b)| a * b).sum()
    }
}

impl Differentiable<f64> for LinearLogistic {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, x: &Array4<f64>) -> dhat::Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((x.dim().0, 2), |(i, k)| if k == 0 { self.score(x, i) } else { 0.0 }))
    }

    fn input_gradient(
        &self,
        x: &Array4<f64>,
        loss_grad: &mut dyn FnMut(&Array2<f64>) -> Array2<f64>,
    ) -> dhat::Result<(Array2<f64>, Array4<f64>)> {
        let z = self.logits(x)?;
        let g = loss_grad(&z);
        let mut dx = Array4::zeros(x.raw_dim());
        for (i, mut row) in dx.outer_iter_mut().enumerate() {
            for (d, w) in row.iter_mut().zip(&self.w) {
                *d = g[[i, 0]] * w;
            }
        }
        Ok((z, dx))
    }
}

pub fn real_attack(eps: f64, eta: f64, iterations: usize, direction: Direction) -> dhat::attacks::AttackConfig {
    dhat::attacks::AttackConfig {
        epsilon: Budget::Real(eps),
        step_size: Budget::Real(eta),
        iterations,
        loss: LossKind::CrossEntropy,
        direction,
        random_start: false,
        kappa: 0.0,
        seed: 0,
    }
}
