//! Copies externally trained tensors into a model by name.
//!
//! A name map is a JSON object from target parameter name to source tensor
//! name, e.g. `{"layers.0.attn.query.weight": "bert.encoder.layer.0.attention.self.query.weight"}`.
//! Source tensors are taken as `[in, out]` matrices; transposition is the
//! exporter's job.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::Parameters;
use crate::error::{Error, Result};

pub type NameMap = BTreeMap<String, String>;

pub fn load_name_map(path: impl AsRef<Path>) -> Result<NameMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Returns the names of the target tensors that were overwritten.
pub fn import_weights(target: &mut Parameters, source: &Parameters, map: &NameMap) -> Result<Vec<String>> {
    // validate everything before touching the target
    for (to, from) in map {
        let src = source.get(from)?;
        let dst = target.get(to)?;
        if src.shape() != dst.shape() {
            return Err(Error::shape(format!(
                "`{from}` {:?} cannot fill `{to}` {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        if !src.all_finite() {
            return Err(Error::NonFinite(from.clone()));
        }
    }
    let mut imported = Vec::with_capacity(map.len());
    for (to, from) in map {
        let value = source.get(from)?.clone();
        if let Some(slot) = target.get_mut(to) {
            *slot = value;
        }
        imported.push(to.clone());
    }
    Ok(imported)
}
