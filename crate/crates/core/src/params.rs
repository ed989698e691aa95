//! Named parameter storage shared by every trainable component.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{uniform, SeededRng};
use crate::tensor::{load_checkpoint, save_checkpoint, CheckpointManifest, Tape, Tensor, Var};

/// Slot index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Affine weight `[fan_in x fan_out]`, uniform in `±1/sqrt(fan_in)`.
    pub fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("sized"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`; the result is indexed by slot.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect()
    }

    /// Flattened copy of all values, in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, manifest: &Path, config_hash: &str, step: u64, extra: &[(String, &Tensor)]) -> Result<CheckpointManifest> {
        let mut all: Vec<(String, &Tensor)> = self.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        all.extend(extra.iter().cloned());
        save_checkpoint(manifest, &all, config_hash, step)
    }

    /// Loads values into an already-constructed store with matching names and
    /// shapes. Entries not belonging to the store are returned to the caller.
    pub fn load_into(&mut self, manifest: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
        let (m, tensors) = load_checkpoint(manifest)?;
        let mut rest = Vec::new();
        let mut seen = vec![false; self.len()];
        for (name, t) in tensors {
            match self.find(&name) {
                Some(id) => {
                    if self.tensors[id.0].shape() != t.shape() {
                        return Err(Error::Shape(format!(
                            "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            self.tensors[id.0].shape()
                        )));
                    }
                    self.tensors[id.0] = t;
                    seen[id.0] = true;
                }
                None => rest.push((name, t)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Parse { line: 1, msg: format!("checkpoint is missing parameter {}", self.names[i]) });
        }
        Ok((m, rest))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
