use std::path::Path;

use crate::error::{Error, Result};
use crate::seqmodel::{ModelConfig, PolicyModel};
use crate::weightsio::archive::{load_archive, save_archive, WeightArchive};

pub const CHECKPOINT_PROVENANCE: &str = "checkpoint";
const CONFIG_KEY: &str = "model_config";

/// Every parameter and buffer, with the model configuration in the metadata.
pub fn model_to_archive(model: &PolicyModel) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new(CHECKPOINT_PROVENANCE);
    archive
        .metadata
        .insert(CONFIG_KEY.into(), serde_json::to_value(model.config())?);
    for (name, t) in model.params().iter() {
        archive.push(name, t.clone())?;
    }
    Ok(archive)
}

pub fn model_from_archive(archive: &WeightArchive) -> Result<PolicyModel> {
    let config = archive
        .metadata
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::invalid("archive carries no model configuration; not a checkpoint"))?;
    let config: ModelConfig = serde_json::from_value(config.clone())?;
    PolicyModel::from_named(config, archive.tensors().iter().map(|t| (t.name.as_str(), &t.tensor)))
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    save_archive(&model_to_archive(model)?, path)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    model_from_archive(&load_archive(path)?)
}
