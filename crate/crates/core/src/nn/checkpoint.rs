//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ATMCKPT1`, a little-endian `u64` manifest
//! length, the JSON manifest (free-form `meta` plus name/shape/byte offset
//! for every tensor), then the concatenated little-endian `f32` payloads.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{AtmError, Result};

pub const MAGIC: &[u8; 8] = b"ATMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy `{prefix}{name}` entries into every parameter of `store`.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let src = self
                .get(&key)
                .ok_or_else(|| AtmError::Shape(format!("checkpoint lacks tensor {key}")))?;
            let dst = store.get_mut(id);
            if dst.shape() != src.shape() {
                return Err(AtmError::Shape(format!(
                    "{key}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| AtmError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing ATMCKPT1 magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| AtmError::Checkpoint(format!("manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| AtmError::Checkpoint(format!("payload of {} truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Stores Adam moments as `adam.m.{name}` / `adam.v.{name}`. The step
    /// counter and config belong in `meta`.
    pub fn push_optimizer(&mut self, state: &OptimizerState, store: &ParamStore) {
        for (id, (m, v)) in store.ids().zip(state.m.iter().zip(&state.v)) {
            self.push(format!("adam.m.{}", store.name(id)), m);
            self.push(format!("adam.v.{}", store.name(id)), v);
        }
    }

    pub fn restore_optimizer(&self, store: &ParamStore, config: AdamConfig, step: u64) -> Result<OptimizerState> {
        let mut state = OptimizerState::new(store, config);
        state.step = step;
        for id in store.ids() {
            for (prefix, slot) in [("adam.m.", &mut state.m[id.0]), ("adam.v.", &mut state.v[id.0])] {
                let key = format!("{prefix}{}", store.name(id));
                let t = self
                    .get(&key)
                    .ok_or_else(|| AtmError::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(AtmError::Shape(format!("{key}: {:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| AtmError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| AtmError::io(path, e))?;
        f.sync_all().map_err(|e| AtmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AtmError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| AtmError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
