//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   tensor name, shape, dtype, byte offset, byte length
//! <dir>/weights.bin     little-endian f32 values, concatenated
//! <dir>/config.json     ModelConfig
//! <dir>/vocab.txt       one token per line
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Parameters};
use super::tensor::Matrix;
use super::TaskModel;
use crate::error::{Error, Result};
use crate::textproc::Vocab;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Entries must tile `[0, blob_len)` exactly, in any order.
    fn check_tiling(&self, blob_len: usize) -> Result<()> {
        let mut entries: Vec<&TensorEntry> = self.tensors.iter().collect();
        entries.sort_by_key(|e| e.offset);
        let mut cursor = 0;
        for e in entries {
            if e.dtype != "f32" {
                return Err(ck(&e.name, format!("unsupported dtype `{}`", e.dtype)));
            }
            if e.nbytes != e.shape[0] * e.shape[1] * 4 {
                return Err(ck(&e.name, format!("{} bytes do not match shape {:?}", e.nbytes, e.shape)));
            }
            if e.offset != cursor {
                return Err(ck(
                    &e.name,
                    format!("offset {} but previous tensor ends at {cursor} (overlap or gap)", e.offset),
                ));
            }
            if e.offset + e.nbytes > blob_len {
                return Err(ck(
                    &e.name,
                    format!("needs bytes {}..{} but blob is truncated at {blob_len}", e.offset, e.offset + e.nbytes),
                ));
            }
            cursor += e.nbytes;
        }
        if cursor != blob_len {
            return Err(ck("<blob>", format!("{} trailing bytes not covered by the manifest", blob_len - cursor)));
        }
        Ok(())
    }
}

fn ck(tensor: &str, message: String) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        message,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `model` to `dir`, rounding parameters to f32.
pub fn save_checkpoint(model: &TaskModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, m) in model.params.iter() {
        let offset = blob.len();
        for &v in &m.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: m.shape(),
            dtype: "f32".into(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    write(&dir.join(WEIGHTS_FILE), &blob)?;
    write(&dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&Manifest { tensors })?)?;
    write(&dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&model.config)?)?;
    model.vocab.save(dir.join(VOCAB_FILE))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_config(dir: impl AsRef<Path>) -> Result<ModelConfig> {
    read_json(&dir.as_ref().join(CONFIG_FILE))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TaskModel> {
    let config = read_config(&dir)?;
    load_checkpoint_with(dir, config)
}

/// Loads weights from `dir` but validates them against `config` instead of
/// the stored `config.json`.
pub fn load_checkpoint_with(dir: impl AsRef<Path>, config: ModelConfig) -> Result<TaskModel> {
    let dir = dir.as_ref();
    config.validate()?;
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    if vocab.len() != config.encoder.vocab_size {
        return Err(Error::shape(format!(
            "vocab.txt has {} tokens, config expects {}",
            vocab.len(),
            config.encoder.vocab_size
        )));
    }
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let blob_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    manifest.check_tiling(blob.len())?;

    let mut params = Parameters::new();
    for e in &manifest.tensors {
        let bytes = &blob[e.offset..e.offset + e.nbytes];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params
            .insert(e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], data))
            .map_err(|err| ck(&e.name, err.to_string()))?;
    }
    params.check_layout(&config.layout())?;
    TaskModel::from_parts(config, vocab, params)
}
