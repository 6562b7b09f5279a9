//! `SGTC1` checkpoints: magic, a `u64` little-endian manifest length, a
//! UTF-8 JSON manifest, then `f64` little-endian blobs for the parameters
//! followed (optionally) by the Adam first and second moments, each in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use thoughtroute_autodiff::{ParameterStore, Tensor};

use super::{AdamState, Plateau, TrainState};

pub const MAGIC: &[u8; 5] = b"SGTC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an SGTC1 checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint manifest: {0}")]
    Manifest(String),
    #[error("parameter `{name}` has shape {found:?} in the checkpoint but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    Unexpected(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Flat `key = value` snapshot of the run configuration.
    pub config: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
    /// Whether Adam moments follow the parameters.
    pub optimizer: bool,
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub plateau_reductions: u32,
    /// Best dev metric as raw `f64` bits.
    pub plateau_best_bits: Option<u64>,
    pub plateau_bad_evals: usize,
    /// All randomness derives from this seed and the counters above.
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// Snapshot of a training state.
    pub fn from_state(config: BTreeMap<String, String>, state: &TrainState, seed: u64) -> Self {
        let mut c = Self::from_params(config, state.params.clone(), seed);
        let m = &mut c.manifest;
        m.optimizer = true;
        m.step = state.adam.step;
        m.epoch = state.epoch;
        m.batch_in_epoch = state.batch_in_epoch;
        m.plateau_reductions = state.plateau.reductions;
        m.plateau_best_bits = state.plateau.best.map(f64::to_bits);
        m.plateau_bad_evals = state.plateau.bad_evals;
        c.adam = Some(state.adam.clone());
        c
    }

    /// Parameters only (no optimizer state).
    pub fn from_params(config: BTreeMap<String, String>, params: ParameterStore, seed: u64) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config,
                params: entries,
                optimizer: false,
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                plateau_reductions: 0,
                plateau_best_bits: None,
                plateau_bad_evals: 0,
                rng_seed: seed,
            },
            params,
            adam: None,
        }
    }

    /// Verifies names and shapes against freshly built parameters.
    pub fn check_against(&self, template: &ParameterStore) -> Result<(), CheckpointError> {
        for (name, t) in template.iter() {
            let found = self
                .params
                .get(name)
                .map_err(|_| CheckpointError::Missing(name.to_string()))?;
            if found.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.params.names().find(|n| !template.contains(n)) {
            return Err(CheckpointError::Unexpected(extra.to_string()));
        }
        Ok(())
    }

    /// Training state to resume from; a params-only checkpoint restarts the
    /// optimizer.
    pub fn into_state(self) -> TrainState {
        let m = &self.manifest;
        let plateau = Plateau {
            reductions: m.plateau_reductions,
            best: m.plateau_best_bits.map(f64::from_bits),
            bad_evals: m.plateau_bad_evals,
        };
        let (epoch, batch_in_epoch) = (m.epoch, m.batch_in_epoch);
        let adam = self.adam.unwrap_or_else(|| AdamState::new(&self.params));
        TrainState {
            params: self.params,
            adam,
            plateau,
            epoch,
            batch_in_epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let json = serde_json::to_vec(&self.manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut out = Vec::with_capacity(13 + json.len() + self.params.numel() * 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut blobs: Vec<&Tensor> = self.params.iter().map(|(_, t)| t).collect();
        if let Some(a) = &self.adam {
            blobs.extend(a.m.iter());
            blobs.extend(a.v.iter());
        }
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(buf) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &buf[..5] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = buf.get(5..13).ok_or(CheckpointError::Truncated)?.try_into().unwrap();
        let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| CheckpointError::Truncated)?;
        let json = buf
            .get(13..13usize.checked_add(len).ok_or(CheckpointError::Truncated)?)
            .ok_or(CheckpointError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Manifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut pos = 13 + len;
        let mut read_blob = |shape: &[usize]| -> Result<Tensor, CheckpointError> {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Manifest("shape overflow".into()))?;
            let end = n.checked_mul(8).and_then(|b| b.checked_add(pos)).ok_or(CheckpointError::Truncated)?;
            let bytes = buf.get(pos..end).ok_or(CheckpointError::Truncated)?;
            pos = end;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Manifest(e.to_string()))
        };
        let mut params = ParameterStore::new();
        for e in &manifest.params {
            let t = read_blob(&e.shape)?;
            params
                .insert(e.name.clone(), t)
                .map_err(|err| CheckpointError::Manifest(err.to_string()))?;
        }
        let adam = if manifest.optimizer {
            let m = manifest.params.iter().map(|e| read_blob(&e.shape)).collect::<Result<Vec<_>, _>>()?;
            let v = manifest.params.iter().map(|e| read_blob(&e.shape)).collect::<Result<Vec<_>, _>>()?;
            Some(AdamState {
                m,
                v,
                step: manifest.step,
            })
        } else {
            None
        };
        if pos != buf.len() {
            return Err(CheckpointError::Manifest(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(Self { manifest, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
