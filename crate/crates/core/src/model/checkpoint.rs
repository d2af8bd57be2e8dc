//! Checkpoint directories: one VQTA file per parameter plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vqta::{self, DType};

use super::Pipeline;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    /// Optimizer steps already applied to these parameters.
    pub step: usize,
    pub seed: u64,
    pub parameters: Vec<ParamEntry>,
}

pub fn save(dir: impl AsRef<Path>, pipeline: &Pipeline, step: usize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::with_capacity(pipeline.params.len());
    for (name, t) in pipeline.params.iter() {
        let file = format!("{name}.vqta");
        vqta::write(dir.join(&file), t, DType::F64)?;
        parameters.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
        });
    }
    let manifest = CheckpointManifest {
        step,
        seed: pipeline.config.seed,
        parameters,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Replaces every parameter of `pipeline` with the stored values and returns
/// the stored step. Trainable flags stay as the pipeline's configuration sets them.
pub fn load(dir: impl AsRef<Path>, pipeline: &mut Pipeline) -> Result<usize> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if manifest.parameters.len() != pipeline.params.len() {
        return Err(Error::shape(format!(
            "checkpoint holds {} parameters, pipeline has {}",
            manifest.parameters.len(),
            pipeline.params.len()
        )));
    }
    for entry in &manifest.parameters {
        let stored = vqta::read(dir.join(&entry.file))?;
        let slot = pipeline.params.get_mut(&entry.name)?;
        if stored.shape() != slot.shape() || entry.shape != slot.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?} in the checkpoint, {:?} in the pipeline",
                entry.name,
                stored.shape(),
                slot.shape()
            )));
        }
        let flag = slot.requires_grad();
        *slot = stored.with_requires_grad(flag);
    }
    Ok(manifest.step)
}
