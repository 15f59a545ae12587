use std::fmt;
use std::str::FromStr;

use crate::error::{Result, SpnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    HardEm,
    HardEmUsi,
    Adam,
}

impl TrainMode {
    pub fn is_generative(self) -> bool {
        !matches!(self, TrainMode::Adam)
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            TrainMode::HardEm => 0,
            TrainMode::HardEmUsi => 1,
            TrainMode::Adam => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(TrainMode::HardEm),
            1 => Some(TrainMode::HardEmUsi),
            2 => Some(TrainMode::Adam),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::HardEm => "hard_em",
            TrainMode::HardEmUsi => "hard_em_usi",
            TrainMode::Adam => "adam",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hard_em" => Ok(TrainMode::HardEm),
            "hard_em_usi" => Ok(TrainMode::HardEmUsi),
            "adam" => Ok(TrainMode::Adam),
            other => Err(format!("unknown mode `{other}` (hard_em, hard_em_usi, adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Smoothing numerator; the per-sum constant is `smoothing / fan-in`.
    pub smoothing: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub product_dropout: f64,
    pub input_dropout: f64,
    /// Standard deviation of the initial log-space accumulators.
    pub init_std: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Generative defaults: batch 128, 15 epochs.
    pub fn generative(use_usi: bool) -> Self {
        TrainConfig {
            mode: if use_usi {
                TrainMode::HardEmUsi
            } else {
                TrainMode::HardEm
            },
            batch_size: 128,
            epochs: 15,
            ..Self::discriminative()
        }
    }

    /// Discriminative defaults: batch 64, 400 epochs, Adam with its usual
    /// constants, both dropout rates 0.2.
    pub fn discriminative() -> Self {
        TrainConfig {
            mode: TrainMode::Adam,
            batch_size: 64,
            epochs: 400,
            smoothing: 1e-2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            product_dropout: 0.2,
            input_dropout: 0.2,
            init_std: 0.5,
            seed: 0,
        }
    }

    pub fn for_mode(mode: TrainMode) -> Self {
        match mode {
            TrainMode::HardEm => Self::generative(false),
            TrainMode::HardEmUsi => Self::generative(true),
            TrainMode::Adam => Self::discriminative(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SpnError::domain("batch size and epochs must be positive"));
        }
        for (name, rate) in [
            ("product dropout", self.product_dropout),
            ("input dropout", self.input_dropout),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SpnError::domain(format!("{name} rate {rate} outside [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SpnError::domain("adam constants out of range"));
        }
        if !(self.smoothing > 0.0) || !(self.adam_epsilon > 0.0) || !(self.init_std >= 0.0) {
            return Err(SpnError::domain(
                "smoothing, adam epsilon and init std must be positive",
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub metric: &'static str,
    pub value: f64,
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} batch={} metric={}:{:.6}",
            self.epoch, self.batch, self.metric, self.value
        )
    }
}
