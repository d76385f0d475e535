use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Momentum SGD, the reference optimizer.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Seeds parameter initialization, batch selection and latent noise.
    pub rng_seed: u64,
    /// Validation period in steps; 0 disables validation.
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub gradient_clip_norm: f64,
    pub precision: Precision,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Checkpoint period in steps when an output directory is given; 0
    /// writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Validation sequences scored at each evaluation; 0 uses all.
    pub validation_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 4,
            max_steps: 20_000,
            rng_seed: 0,
            eval_every: 1000,
            gradient_clip_norm: 5.0,
            precision: Precision::F32,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            checkpoint_every: 0,
            validation_sequences: 64,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a step can be checked to
    /// leave parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.gradient_clip_norm >= 0.0) {
            return Err(Error::invalid("gradient_clip_norm must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("momentum and Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon must be positive"));
        }
        Ok(())
    }
}
