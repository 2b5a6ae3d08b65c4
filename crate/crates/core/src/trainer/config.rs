use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::FreezeMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Timesteps per sampled window.
    pub context_k: usize,
    /// Gate-mass penalty coefficient; 0 disables the penalty.
    pub alpha: f64,
    /// Per layer, the head indices whose gate mass is penalized.
    pub markov_heads: Vec<Vec<usize>>,
    pub freeze: FreezeMode,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 keeps only the first and last.
    pub checkpoint_every: u64,
    /// Metric log interval in steps; the first and last step are always logged.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            warmup_steps: 1_000,
            weight_decay: 1e-4,
            context_k: 20,
            alpha: 0.1,
            markov_heads: Vec::new(),
            freeze: FreezeMode::Full,
            seed: 0,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.context_k == 0 {
            return Err(Error::invalid("batch_size and context_k must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("weight_decay and alpha must be non-negative"));
        }
        Ok(())
    }
}
