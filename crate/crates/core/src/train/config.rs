use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{ensure, Result};

/// Optimizer, schedule and objective settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    pub learning_rate: f64,
    /// Multiplier applied when the validation loss plateaus.
    pub lr_decay: f64,
    /// Epochs without validation improvement before the rate decays.
    pub plateau_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Weight of the guidance loss; 0 trains an unguided model.
    pub lambda: f64,
    pub epsilon_guide: f64,
    /// Give negatives an all-zero mask instead of all-ones.
    pub suppress_negatives: bool,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            momentum: 0.9,
            learning_rate: 0.01,
            lr_decay: 0.1,
            plateau_patience: 5,
            early_stop_patience: 10,
            max_epochs: 100,
            lambda: 1.0,
            epsilon_guide: 1e-3,
            suppress_negatives: false,
            augment: AugmentPolicy::RegionPreserving,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be finite and non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0, 1), got {}",
            self.momentum
        );
        ensure!(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            "lr_decay must lie in (0, 1], got {}",
            self.lr_decay
        );
        ensure!(self.max_epochs >= 1, "max_epochs must be at least 1");
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda must be finite and non-negative"
        );
        ensure!(
            self.epsilon_guide > 0.0 && self.epsilon_guide < 1.0,
            "epsilon_guide must lie in (0, 1)"
        );
        Ok(())
    }
}
