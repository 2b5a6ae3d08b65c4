use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::model::PolicyModel;
use crate::seqmodel::params::ParamRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    #[default]
    Full,
    /// Attention sublayers (norm, projections, gate) stay fixed.
    EmbeddingAndFfnOnly,
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FreezeMode::Full),
            "embedding_and_ffn_only" => Ok(FreezeMode::EmbeddingAndFfnOnly),
            other => Err(Error::invalid(format!(
                "unknown freeze mode {other:?}; expected full or embedding_and_ffn_only"
            ))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezeMode::Full => "full",
            FreezeMode::EmbeddingAndFfnOnly => "embedding_and_ffn_only",
        })
    }
}

impl FreezeMode {
    pub fn trains(self, role: ParamRole) -> bool {
        match (self, role) {
            (_, ParamRole::Buffer) => false,
            (FreezeMode::Full, _) => true,
            (FreezeMode::EmbeddingAndFfnOnly, r) => {
                !matches!(r, ParamRole::AttentionNorm | ParamRole::Attention | ParamRole::Gate)
            }
        }
    }
}

/// One flag per parameter slot, in store order.
pub fn freeze_mask(model: &PolicyModel, mode: FreezeMode) -> Vec<bool> {
    model.params().roles().iter().map(|&r| mode.trains(r)).collect()
}
