use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate at `step` of `total` (cosine decays to 0 at `total`).
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => {
                let t = step.min(total) as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    #[default]
    Kd,
    /// Squared distance of trainable text biases to their pretrained values.
    #[serde(alias = "mse")]
    MseBias,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::None => "none",
            Regularizer::Kd => "kd",
            Regularizer::MseBias => "mse_bias",
        })
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regularizer::None),
            "kd" => Ok(Regularizer::Kd),
            "mse" | "mse_bias" => Ok(Regularizer::MseBias),
            _ => Err(Error::Config(format!("unknown regularizer `{s}` (none|kd|mse)"))),
        }
    }
}

/// Distillation term shape. `RawCosine` is the plain mean cosine, whose
/// minimization pushes live weights away from the reference; kept for
/// comparison runs only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdForm {
    #[default]
    OneMinusCosine,
    RawCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub schedule: Schedule,
    pub beta: f64,
    pub regularizer: Regularizer,
    pub kd_form: KdForm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base_to_new()
    }
}

impl TrainConfig {
    pub fn base_to_new() -> Self {
        Self {
            lr: 0.002,
            batch_size: 32,
            epochs: 50,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            beta: 8.0,
            regularizer: Regularizer::Kd,
            kd_form: KdForm::OneMinusCosine,
            seed: 0,
        }
    }

    pub fn few_shot() -> Self {
        Self {
            beta: 2.0,
            ..Self::base_to_new()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Contrastive pretraining recipe (Adam, all parameters trainable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Capped at the number of classes: a batch holds distinct classes.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 12,
            lr: 3e-4,
            warmup_steps: 30,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        self.schedule
            .lr_at(self.lr, step - self.warmup_steps, self.steps - self.warmup_steps.min(self.steps))
    }
}
