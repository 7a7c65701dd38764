//! JSON checkpoints: model config plus every parameter by dotted name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "ftpose-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    config: ModelConfig,
    params: BTreeMap<String, Entry>,
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut map = BTreeMap::new();
    params.for_each(&mut |name, t| {
        map.insert(
            name.to_string(),
            Entry {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    });
    let file = File {
        format: FORMAT.into(),
        config: cfg.clone(),
        params: map,
    };
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file: File = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", file.format)));
    }
    let template = ModelParams::init(&file.config, 0)?;
    let mut entries = file.params;
    let mut failure = None;
    let params = template.map(&mut |name, t| match entries.remove(name) {
        Some(e) if e.shape == t.shape() => Tensor::new(e.shape, e.data).unwrap_or_else(|err| {
            failure.get_or_insert(Error::Checkpoint(format!("{name}: {err}")));
            t.clone()
        }),
        Some(e) => {
            failure.get_or_insert(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                e.shape,
                t.shape()
            )));
            t.clone()
        }
        None => {
            failure.get_or_insert(Error::Checkpoint(format!("missing parameter {name}")));
            t.clone()
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok((file.config, params))
}
