//! Experiment configuration files.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use markovdt::envsuite::{posture_env, EnvSpec, Quality};
use markovdt::seqmodel::ModelConfig;
use markovdt::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives dataset collection, model initialization, synthetic heads and
    /// batch sampling. `train.seed` is overwritten with it.
    pub seed: u64,
    pub env: EnvSpec,
    pub data: DataConfig,
    /// `state_dim`, `action_dim` and `context_k` are overwritten from the
    /// environment and `train.context_k`.
    pub model: ModelConfig,
    pub init: InitConfig,
    /// An empty `markov_heads` means "the heads markovlab flags on the
    /// initialized model".
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            env: posture_env(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub quality: Quality,
    pub episodes: usize,
    /// Load this dataset instead of collecting one.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            quality: Quality::Medium,
            episodes: 200,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Layer whose heads receive synthetic Markov query/key pairs.
    pub synthetic_layer: usize,
    /// Heads that receive synthetic Markov pairs; empty for none.
    pub synthetic_heads: Vec<usize>,
    /// Target and detection threshold for the Markov ratio.
    pub r: f64,
    /// Scale `c` of the synthetic product `c · U Uᵀ`.
    pub scale: f64,
    /// Archive of pretrained tensors to import after the synthetic heads.
    pub archive: Option<PathBuf>,
    /// Mapping file for `archive`; without one, identical names are copied.
    pub mapping: Option<PathBuf>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            synthetic_layer: 0,
            synthetic_heads: vec![0, 1],
            r: 20.0,
            scale: 4.0,
            archive: None,
            mapping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Defaults to `train.context_k`.
    pub context_k: Option<usize>,
    /// Defaults to the dataset's best return (posture) or the shortest-path
    /// return from each start (maze).
    pub target_rtg: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 20,
            context_k: None,
            target_rtg: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| Invalid(format!("invalid experiment config: {e}")).into())
    }

    /// Applies overrides and derived fields, then validates.
    pub fn resolve(mut self, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.model.state_dim = self.env.state_dim();
        self.model.action_dim = self.env.action_dim();
        self.model.context_k = self.train.context_k;
        self.model.validate()?;
        self.train.validate()?;
        self.env.build()?;
        if self.env.max_steps() > self.model.max_timestep {
            return Err(Invalid(format!(
                "model.max_timestep {} is below the environment's episode cap {}",
                self.model.max_timestep,
                self.env.max_steps()
            ))
            .into());
        }
        if self.data.episodes == 0 {
            return Err(Invalid("data.episodes must be at least 1".into()).into());
        }
        if self.eval.episodes == 0 {
            return Err(Invalid("eval.episodes must be at least 1".into()).into());
        }
        if self.eval.context_k.is_some_and(|k| k == 0 || k > self.model.context_k) {
            return Err(Invalid(format!("eval.context_k must lie in 1..={}", self.model.context_k)).into());
        }
        if self.init.synthetic_layer >= self.model.n_layers
            || self.init.synthetic_heads.iter().any(|&h| h >= self.model.n_heads)
        {
            return Err(Invalid("init.synthetic_layer / synthetic_heads out of range for the model".into()).into());
        }
        if !(self.init.r > 1.0 && self.init.scale > 0.0) {
            return Err(Invalid("init.r must exceed 1 and init.scale must be positive".into()).into());
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn eval_context_k(&self) -> usize {
        self.eval.context_k.unwrap_or(self.train.context_k)
    }
}
