//! JSON checkpoint files.
//!
//! Layout (version 1):
//!
//! ```json
//! {
//!   "format": "siamtst-checkpoint",
//!   "version": 1,
//!   "kind": "backbone",
//!   "config": { ... },
//!   "params": [ { "name": "embed.weight", "shape": [64, 12], "data": [ ... ] } ]
//! }
//! ```
//!
//! `config` echoes the settings needed to rebuild the component; `params`
//! lists every tensor in registration order, row-major.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "siamtst-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            config: serde_json::to_value(config)?,
            params: store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Overwrites `store` with the recorded values; names and shapes must match.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut src = ParamStore::new();
        for p in &self.params {
            src.register(
                p.name.clone(),
                Tensor::new(p.shape.clone(), p.data.clone())?,
            );
        }
        store.load_from(&src)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
