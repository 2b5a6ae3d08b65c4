//! Copying archive tensors into model slots.
//!
//! A mapping file is TOML:
//!
//! ```toml
//! [[map]]
//! from = "layer0.head5.wq"     # archive tensor
//! to = "layer0.head1.wq"       # model slot
//! truncate = "leading"         # optional
//! ```
//!
//! Without `truncate` the shapes must match exactly. `leading` keeps the
//! top-left block of the target's shape and requires the source to be at
//! least that large in every dimension.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::seqmodel::{ParamRole, PolicyModel};
use crate::weightsio::archive::WeightArchive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Leading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate: Option<Truncation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mapping {
    #[serde(default)]
    pub map: Vec<MapEntry>,
}

impl Mapping {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Mapping(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Identity mapping for every archive tensor whose name is also a model
    /// attention slot.
    pub fn same_names(archive: &WeightArchive, model: &PolicyModel) -> Self {
        let map = archive
            .names()
            .filter(|n| model.params().role_of(n) == Some(ParamRole::Attention))
            .map(|n| MapEntry {
                from: n.to_string(),
                to: n.to_string(),
                truncate: None,
            })
            .collect();
        Mapping { map }
    }
}

fn resolve(entry: &MapEntry, source: &Tensor, target_shape: &[usize]) -> Result<Tensor> {
    if source.shape() == target_shape {
        return Ok(source.clone());
    }
    match entry.truncate {
        None => Err(Error::Mapping(format!(
            "{} -> {}: shape {:?} does not match {:?} and no truncation rule is given",
            entry.from,
            entry.to,
            source.shape(),
            target_shape
        ))),
        Some(Truncation::Leading) => {
            if source.shape().len() != target_shape.len() || target_shape.len() > 2 {
                return Err(Error::Mapping(format!(
                    "{} -> {}: leading truncation needs matching rank up to 2, got {:?} and {:?}",
                    entry.from,
                    entry.to,
                    source.shape(),
                    target_shape
                )));
            }
            let (rows, cols) = if target_shape.len() == 2 {
                (target_shape[0], target_shape[1])
            } else {
                (1, target_shape[0])
            };
            let block = source
                .clone()
                .reshape(&[source.rows(), source.cols()])?
                .leading_block(rows, cols)
                .map_err(|e| Error::Mapping(format!("{} -> {}: {e}", entry.from, entry.to)))?;
            block.reshape(target_shape)
        }
    }
}

/// Copies mapped tensors into `model`. Either every entry applies or the
/// model is left untouched. Embedding, action-head and buffer slots cannot
/// be targets. Returns the slots written.
pub fn init_from_archive(model: &mut PolicyModel, archive: &WeightArchive, mapping: &Mapping) -> Result<Vec<String>> {
    let mut staged = Vec::with_capacity(mapping.map.len());
    let mut targets = HashSet::new();
    for entry in &mapping.map {
        let role = model
            .params()
            .role_of(&entry.to)
            .ok_or_else(|| Error::Mapping(format!("model has no slot named {}", entry.to)))?;
        if matches!(role, ParamRole::Embedding | ParamRole::ActionHead | ParamRole::Buffer) {
            return Err(Error::Mapping(format!(
                "{} is an embedding, action-head or buffer slot and always keeps its fresh value",
                entry.to
            )));
        }
        if !targets.insert(entry.to.as_str()) {
            return Err(Error::Mapping(format!("slot {} is mapped twice", entry.to)));
        }
        let source = archive
            .get(&entry.from)
            .ok_or_else(|| Error::Mapping(format!("archive has no tensor named {}", entry.from)))?;
        let shape = model.params().get(&entry.to).expect("slot exists").shape().to_vec();
        staged.push((entry.to.clone(), resolve(entry, source, &shape)?));
    }
    let mut written = Vec::with_capacity(staged.len());
    for (name, t) in staged {
        model.params_mut().set(&name, t)?;
        written.push(name);
    }
    Ok(written)
}
