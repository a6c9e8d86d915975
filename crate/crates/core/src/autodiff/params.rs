//! Named parameter storage and the JSON checkpoint format.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "dynst-checkpoint",
//!   "version": 1,
//!   "header": { ...caller-defined, e.g. model kind and config... },
//!   "tensors": [ { "name": "...", "shape": [..], "data": [..row-major..] }, ... ]
//! }
//! ```
//!
//! Values are written with shortest round-trip formatting, so save/load is
//! exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dynst-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    header: serde_json::Value,
    tensors: Vec<StoredTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies of all parameter values, for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.tensors.len()
            || snapshot.iter().zip(&self.tensors).any(|(s, t)| s.len() != t.len())
        {
            return Err(Error::Contract("snapshot does not match parameter layout".into()));
        }
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.data_mut().copy_from_slice(s);
        }
        Ok(())
    }

    /// `name=norm` for every parameter, used in divergence diagnostics.
    pub fn norm_summary(&self) -> String {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn to_json(&self, header: serde_json::Value) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            header,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| StoredTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    /// Parses a checkpoint, returning the parameters and the header.
    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut store = Self::new();
        for t in ckpt.tensors {
            store.add(t.name, Tensor::new(t.shape, t.data)?);
        }
        Ok((store, ckpt.header))
    }

    pub fn save(&self, path: &Path, header: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_json(header)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
