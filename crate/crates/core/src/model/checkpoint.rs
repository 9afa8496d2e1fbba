//! Checkpoint files: a header carrying the model config, then one line per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

use super::config::ModelConfig;
use super::params::parameter_specs;

pub const CHECKPOINT_FORMAT: &str = "cirm-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamLine {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn checkpoint_to_string(cfg: &ModelConfig, params: &ParamStore) -> String {
    let header = Header { format: CHECKPOINT_FORMAT.into(), version: 1, config: cfg.clone() };
    let mut out = serde_json::to_string(&header).expect("config serializes");
    out.push('\n');
    for (name, t) in params.iter() {
        let line = ParamLine { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() };
        out.push_str(&serde_json::to_string(&line).expect("parameter serializes"));
        out.push('\n');
    }
    out
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    fs::write(path, checkpoint_to_string(cfg, params)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint and checks that its parameters match the layout its config implies.
pub fn parse_checkpoint(text: &str) -> Result<(ModelConfig, ParamStore)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| Error::Checkpoint(format!("line 1: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format `{}` v{}", header.format, header.version)));
    }
    header.config.validate()?;
    let mut params = ParamStore::new();
    for (i, line) in lines {
        let p: ParamLine =
            serde_json::from_str(line).map_err(|e| Error::Checkpoint(format!("line {}: {e}", i + 1)))?;
        let t = Tensor::new(p.shape, p.data).map_err(|e| Error::Checkpoint(format!("`{}`: {e}", p.name)))?;
        params.insert(p.name, t);
    }
    let specs = parameter_specs(&header.config);
    let layout_ok = specs.len() == params.len()
        && specs
            .iter()
            .zip(params.iter())
            .all(|(s, (name, t))| s.name == name && s.shape == t.shape());
    if !layout_ok {
        return Err(Error::Checkpoint("parameters do not match the stored config".into()));
    }
    Ok((header.config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
