//! Binary tensor container used for checkpoints and feature matrices.
//!
//! Layout: a little-endian `u64` byte length, a UTF-8 JSON manifest of that
//! length, then every tensor as little-endian `f64` values in row-major order,
//! in the order listed under the manifest's `"tensors"` key. The manifest is
//! a JSON object; callers may add any other keys.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// A manifest plus named matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

const MAX_HEADER: u64 = 64 << 20;

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TensorFileError> {
        let mut meta = self.meta.clone();
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()] })
            .collect();
        meta.insert("tensors".into(), serde_json::to_value(entries)?);
        let header = serde_json::to_vec(&Value::Object(meta))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<TensorFile, TensorFileError> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(TensorFileError::Malformed(format!("manifest length {len} is implausible")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let mut meta = match serde_json::from_slice::<Value>(&header)? {
            Value::Object(m) => m,
            _ => return Err(TensorFileError::Malformed("manifest is not a JSON object".into())),
        };
        let entries: Vec<TensorEntry> = match meta.remove("tensors") {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(TensorFileError::Malformed("manifest lacks \"tensors\"".into())),
        };
        let mut tensors = Vec::with_capacity(entries.len());
        let mut buf = [0u8; 8];
        for e in entries {
            let n = e.shape[0] * e.shape[1];
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| {
                    TensorFileError::Malformed(format!("tensor {} truncated", e.name))
                })?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), data)
                .map_err(|err| TensorFileError::Malformed(err.to_string()))?;
            tensors.push((e.name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorFileError::Malformed("trailing bytes after last tensor".into()));
        }
        Ok(TensorFile { meta, tensors })
    }
}

/// Writes a single `features` matrix, the input format of hypergraph
/// construction.
pub fn write_features<W: Write>(w: W, features: &Array2<f64>) -> Result<(), TensorFileError> {
    TensorFile { meta: Map::new(), tensors: vec![("features".into(), features.clone())] }.write(w)
}

pub fn read_features<R: Read>(r: R) -> Result<Array2<f64>, TensorFileError> {
    let file = TensorFile::read(r)?;
    match file.tensors.into_iter().find(|(n, _)| n == "features") {
        Some((_, t)) => Ok(t),
        None => Err(TensorFileError::Malformed("no tensor named \"features\"".into())),
    }
}
