//! JSON checkpoints: a manifest (format, version, precision, config,
//! vocabularies) followed by named parameter arrays.
//!
//! Values are stored as `f64`, which represents every `f32` exactly, and
//! printed with round-trip precision, so save → load reproduces parameters
//! bit for bit.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CsranModel, ModelConfig, Network};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{ParamStore, Tensor};

const FORMAT: &str = "csran-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    frozen_rows: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    precision: Precision,
    config: ModelConfig,
    words: Vocab,
    chars: Vocab,
    params: Vec<StoredParam>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    precision: Precision,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_header(h: &Header) -> Result<()> {
    if h.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", h.format)));
    }
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            h.version
        )));
    }
    Ok(())
}

/// Precision a checkpoint was saved with, without loading its parameters.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let header: Header = serde_json::from_str(&read(path)?)?;
    check_header(&header)?;
    Ok(header.precision)
}

impl<T: Scalar> CsranModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = Vec::with_capacity(self.params.len());
        for (_, p) in self.params.iter() {
            let values: Vec<f64> = p.value.data().iter().map(|v| v.as_f64()).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {} has non-finite values", p.name)));
            }
            params.push(StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                frozen_rows: p
                    .frozen_rows
                    .iter()
                    .flat_map(|rows| rows.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i))
                    .collect(),
                values,
            });
        }
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: Precision::of::<T>(),
            config: self.config.clone(),
            words: self.words.clone(),
            chars: self.chars.clone(),
            params,
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let header: Header = serde_json::from_str(&text)?;
        check_header(&header)?;
        if header.precision != Precision::of::<T>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                header.precision,
                T::NAME
            )));
        }
        let file: CheckpointFile = serde_json::from_str(&text)?;
        let mut store = ParamStore::new();
        // initial values are overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(&file.config, file.words.len(), file.chars.len(), &mut store, &mut rng)?;
        if store.len() != file.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, the configured network {}",
                file.params.len(),
                store.len()
            )));
        }
        for sp in file.params {
            let id = store
                .id(&sp.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", sp.name)))?;
            let param = store.get_mut(id);
            if param.value.shape() != sp.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    sp.name,
                    sp.shape,
                    param.value.shape()
                )));
            }
            param.value = Tensor::new(sp.shape, sp.values.iter().map(|&v| T::of(v)).collect())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", sp.name)))?;
            param.trainable = sp.trainable;
            param.frozen_rows = if sp.frozen_rows.is_empty() {
                None
            } else {
                let mut rows = vec![false; param.value.rows()];
                for r in sp.frozen_rows {
                    *rows
                        .get_mut(r)
                        .ok_or_else(|| Error::Checkpoint(format!("frozen row {r} of {} out of range", sp.name)))? = true;
                }
                Some(rows)
            };
        }
        Ok(CsranModel {
            config: file.config,
            net,
            params: store,
            words: file.words,
            chars: file.chars,
        })
    }
}
