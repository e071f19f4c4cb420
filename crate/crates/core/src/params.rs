//! Named parameter storage and its binding onto a [`Tape`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
    /// Excluded from gradients even when the owning store is bound as trainable.
    #[serde(default)]
    pub frozen: bool,
}

/// Ordered collection of learnable tensors owned by one model component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bytes of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on the tape as a leaf. With `trainable` set,
    /// non-frozen leaves track gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && !p.frozen))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter; zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }
}
