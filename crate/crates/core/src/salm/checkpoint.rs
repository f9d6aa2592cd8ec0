//! Model checkpoints in the tensor container format.

use std::io::{Read, Write};

use serde_json::{Map, Value};

use super::model::ModelParams;
use super::{ModelDims, SalmError};
use crate::io::{TensorFile, TensorFileError};

pub const FORMAT: &str = "hmllm-checkpoint";
pub const VERSION: u64 = 1;

/// Header fields stored alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    /// Last completed stage (0 for a fresh initialisation).
    pub stage: u8,
    pub seed: u64,
    /// Extra caller-supplied keys.
    pub extra: Map<String, Value>,
}

pub fn write_checkpoint<W: Write>(w: W, params: &ModelParams, info: &CheckpointInfo) -> Result<(), SalmError> {
    let mut meta = info.extra.clone();
    meta.insert("format".into(), Value::from(FORMAT));
    meta.insert("version".into(), Value::from(VERSION));
    meta.insert("stage".into(), Value::from(info.stage));
    meta.insert("seed".into(), Value::from(info.seed));
    meta.insert("dims".into(), serde_json::to_value(params.dims).map_err(TensorFileError::from)?);
    let tensors = params.tensors().into_iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect();
    TensorFile { meta, tensors }.write(w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ModelParams, CheckpointInfo), SalmError> {
    let mut file = TensorFile::read(r)?;
    let bad = |m: String| SalmError::TensorFile(TensorFileError::Malformed(m));
    if file.meta.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(bad("not a model checkpoint".into()));
    }
    if file.meta.get("version").and_then(Value::as_u64) != Some(VERSION) {
        return Err(bad("unsupported checkpoint version".into()));
    }
    let dims: ModelDims = serde_json::from_value(file.meta.remove("dims").ok_or_else(|| bad("missing dims".into()))?)
        .map_err(TensorFileError::from)?;
    dims.validate()?;
    let stage = file.meta.get("stage").and_then(Value::as_u64).ok_or_else(|| bad("missing stage".into()))? as u8;
    let seed = file.meta.get("seed").and_then(Value::as_u64).ok_or_else(|| bad("missing seed".into()))?;
    let mut params = ModelParams::zeros(dims);
    for (_, name, slot) in params.tensors_mut() {
        let t = file.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.dim() != slot.dim() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), slot.dim())));
        }
        slot.assign(t);
    }
    if file.tensors.len() != params.tensors().len() {
        return Err(bad("unexpected extra tensors".into()));
    }
    for key in ["format", "version", "stage", "seed"] {
        file.meta.remove(key);
    }
    Ok((params, CheckpointInfo { stage, seed, extra: file.meta }))
}
