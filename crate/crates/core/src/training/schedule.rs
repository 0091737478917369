use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SGD hyperparameters and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Zero-based epochs at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl TrainSchedule {
    /// Decay points at 80% and 90% of `epochs`, momentum 0.9, weight decay 5e-4.
    pub fn standard(epochs: usize, base_lr: f64, batch_size: usize, seed: u64) -> Self {
        let decay_epochs = [epochs * 8 / 10, epochs * 9 / 10]
            .into_iter()
            .filter(|&e| e > 0 && e < epochs)
            .fold(Vec::new(), |mut v, e| {
                if v.last() != Some(&e) {
                    v.push(e);
                }
                v
            });
        TrainSchedule {
            epochs,
            base_lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs,
            decay_factor: 0.1,
            batch_size,
            seed,
        }
    }

    /// `base_lr · decay_factor^k` where `k` counts decay epochs `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let field = |f: &str| format!("{section}.{f}");
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(field("base_lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(field("momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(field("weight_decay"), "must be >= 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config(field("decay_factor"), "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be >= 1"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(field("decay_epochs"), "must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&d| d >= self.epochs) {
            return Err(Error::config(field("decay_epochs"), "every decay epoch must be < epochs"));
        }
        Ok(())
    }
}
