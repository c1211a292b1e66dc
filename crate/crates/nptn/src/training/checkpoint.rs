//! Checkpoint files: the 5-byte magic `NPTN1`, an 8-byte little-endian
//! header length, a UTF-8 JSON header, then raw little-endian `f32` tensors
//! in the order the header lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::config::TrainConfig;
use super::model::{build_model, Model};
use super::train::{Metrics, TrainState};
use crate::error::{NptnError, Result};
use crate::rng::Rng;
use crate::tensor::NDTensor;

pub const MAGIC: &[u8; 5] = b"NPTN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchSpec,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: Rng,
    pub metrics: Metrics,
    pub model_label: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Model,
    pub state: TrainState,
    pub model_label: Option<String>,
}

/// Serialize parameters, batch norm statistics, momentum buffers and the
/// training state.
pub fn checkpoint_bytes(
    model: &Model,
    state: &TrainState,
    model_label: Option<&str>,
) -> Result<Vec<u8>> {
    let mut names = model.param_names();
    names.extend(model.buffer_names());
    names.extend(model.param_names().iter().map(|n| format!("velocity.{n}")));
    let mut tensors: Vec<&NDTensor<f32>> = model.params();
    tensors.extend(model.buffers());
    tensors.extend(state.velocity.iter());
    if names.len() != tensors.len() {
        return Err(NptnError::contract(
            "momentum buffers do not match the model",
        ));
    }
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        config: state.config.clone(),
        epoch: state.epoch,
        rng: state.rng.clone(),
        metrics: state.metrics.clone(),
        model_label: model_label.map(str::to_string),
        tensors: names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(13 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    state: &TrainState,
    model_label: Option<&str>,
) -> Result<()> {
    let p = path.as_ref();
    fs::write(p, checkpoint_bytes(model, state, model_label)?).map_err(|e| NptnError::io(p, e))
}

pub fn parse_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let bad = |msg: String| NptnError::format(origin, msg);
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("missing NPTN1 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = bytes
        .get(13..13usize.saturating_add(hlen))
        .ok_or_else(|| bad(format!("truncated header ({hlen} bytes declared)")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;

    let mut model: Model =
        build_model(&header.arch, &mut Rng::new(0)).map_err(|e| bad(e.to_string()))?;
    let mut velocity: Vec<NDTensor<f32>> = model
        .params()
        .iter()
        .map(|p| NDTensor::zeros(p.shape()))
        .collect();
    let mut names = model.param_names();
    names.extend(model.buffer_names());
    names.extend(model.param_names().iter().map(|n| format!("velocity.{n}")));
    if header.tensors.len() != names.len() {
        return Err(bad(format!(
            "{} tensors listed, the architecture has {}",
            header.tensors.len(),
            names.len()
        )));
    }

    let mut pos = 13 + hlen;
    let mut read = |entry: &TensorEntry, name: &str, t: &mut NDTensor<f32>| -> Result<()> {
        if entry.name != name || entry.shape != t.shape() {
            return Err(bad(format!(
                "tensor `{}` {:?} where `{name}` {:?} was expected",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let n = t.len() * 4;
        let raw = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated data in tensor `{name}`")))?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
        pos += n;
        Ok(())
    };
    let mut entries = header.tensors.iter().zip(&names);
    for t in model.params_mut() {
        let (e, n) = entries.next().unwrap();
        read(e, n, t)?;
    }
    for t in model.buffers_mut() {
        let (e, n) = entries.next().unwrap();
        read(e, n, t)?;
    }
    for t in &mut velocity {
        let (e, n) = entries.next().unwrap();
        read(e, n, t)?;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        model,
        state: TrainState {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            velocity,
            metrics: header.metrics,
        },
        model_label: header.model_label,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let p = path.as_ref();
    if !p.exists() {
        return Err(NptnError::MissingData(p.to_path_buf()));
    }
    let bytes = fs::read(p).map_err(|e| NptnError::io(p, e))?;
    parse_checkpoint(&bytes, &p.display().to_string())
}
