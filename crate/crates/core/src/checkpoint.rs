//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `DBCKPT01`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor's values as little-endian `f32` in
//! header order. The same model and metadata always serialize to the same
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormState;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::network::{DualBranchModel, InputSpec, Variant};

pub const MAGIC: &[u8; 8] = b"DBCKPT01";

/// Training context stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<usize>,
    /// Subject label space of the training split, in label order.
    pub train_subjects: Vec<u32>,
    /// Pattern label space, in label order.
    pub gesture_ids: Vec<u32>,
    pub normalization: Option<NormStats>,
    /// Window step used for training data.
    pub window_step: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    channels: usize,
    momentum: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: Variant,
    seed: u64,
    n_patterns: usize,
    n_subjects: usize,
    input: InputSpec,
    dropout: f64,
    tensors: Vec<TensorEntry>,
    batch_norms: Vec<BnEntry>,
    meta: CheckpointMeta,
}

/// Serializes a model and its metadata.
pub fn to_bytes(model: &DualBranchModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        variant: model.variant(),
        seed: model.seed(),
        n_patterns: model.n_patterns(),
        n_subjects: model.n_subjects(),
        input: model.input_spec(),
        dropout: model.dropout_rate(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
        batch_norms: model
            .batch_norms()
            .iter()
            .map(|b| BnEntry {
                name: b.name.clone(),
                channels: b.state.channels(),
                momentum: b.state.momentum,
                eps: b.state.eps,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for p in model.params() {
        put(p.tensor.data());
    }
    for b in model.batch_norms() {
        put(&b.state.running_mean);
        put(&b.state.running_var);
    }
    Ok(out)
}

/// Inverse of [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(DualBranchModel, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut data = &bytes[16 + len..];
    let mut take = |n: usize| -> Result<Vec<f32>> {
        if data.len() < 4 * n {
            return Err(Error::Checkpoint("truncated tensor data".into()));
        }
        let (head, rest) = data.split_at(4 * n);
        data = rest;
        Ok(head
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };

    let mut model = DualBranchModel::new(
        header.variant,
        header.n_patterns,
        header.n_subjects,
        header.seed,
        header.input,
    )
    .map_err(|e| Error::Checkpoint(format!("cannot rebuild model: {e}")))?;
    model.set_dropout_rate(header.dropout)?;
    if header.tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, architecture has {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    for t in &header.tensors {
        let expected = model
            .param(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", t.name)))?
            .shape()
            .to_vec();
        if expected != t.shape {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, architecture {:?}",
                t.name, t.shape, expected
            )));
        }
        let values = take(t.shape.iter().product())?;
        model.set_param(&t.name, &values)?;
    }
    for b in &header.batch_norms {
        let running_mean = take(b.channels)?;
        let running_var = take(b.channels)?;
        let state = BatchNormState {
            running_mean,
            running_var,
            momentum: b.momentum,
            eps: b.eps,
        };
        model
            .set_batch_norm(&b.name, state)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &DualBranchModel, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(DualBranchModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
