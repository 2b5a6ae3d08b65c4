use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum timesteps per window; token capacity is three times this.
    pub context_k: usize,
    /// Size of the absolute-timestep embedding table.
    pub max_timestep: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub rtg_scale: f64,
    pub moa_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 1,
            n_heads: 4,
            d_model: 16,
            d_ff: 32,
            context_k: 20,
            max_timestep: 512,
            state_dim: 2,
            action_dim: 1,
            rtg_scale: 100.0,
            moa_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn token_capacity(&self) -> usize {
        3 * self.context_k
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context_k", self.context_k),
            ("max_timestep", self.max_timestep),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model config: {name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return Err(Error::invalid("model config: rtg_scale must be positive and finite"));
        }
        Ok(())
    }
}
