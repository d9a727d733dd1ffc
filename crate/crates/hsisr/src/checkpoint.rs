//! Checkpoint container (`HDLC`): magic, a little-endian u32 format version,
//! a length-prefixed JSON metadata document (model config, step/epoch
//! counters, RNG seed, batch-norm hyperparameters), then one record per
//! tensor: `[name_len u32][name][rank u32][dims u32 x rank][f32 values]`.
//!
//! Records hold every parameter leaf (including batch-norm running
//! statistics) under its canonical name, then the Adam moments for each
//! trainable leaf under `adam.m.<name>` / `adam.v.<name>`. Loading validates
//! the magic, the version, and the exact name set implied by the config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams, ResidualBlockParams};
use crate::tensor::{BatchNormState, ConvKernel, TensorError};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: expected \"HDLC\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {got} (expected {expected})")]
    Version { expected: u32, got: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("metadata document is invalid: {0}")]
    Meta(String),
    #[error("record name is not UTF-8")]
    BadName,
    #[error("tensor name set mismatch; missing: {missing:?}, unexpected: {unexpected:?}")]
    NameSet {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("tensor '{name}' has {got} values, expected {expected}")]
    TensorSize {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Serialized training state: parameters, optimizer moments, and the
/// counters needed to resume a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    /// Master seed of the training run; all random streams (init, per-epoch
    /// shuffles) are derived from it, so seed + epoch is the full RNG state.
    pub rng_seed: u64,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    config: ModelConfig,
    step: u64,
    epoch: u64,
    rng_seed: u64,
    bn_epsilon: f32,
    bn_momentum: f32,
}

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[u32], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes a checkpoint; the byte stream is deterministic for a given value.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let (bn_epsilon, bn_momentum) = ckpt
        .params
        .blocks
        .first()
        .map(|b| (b.bn.epsilon, b.bn.momentum))
        .unwrap_or((1e-5, 0.1));
    let meta = MetaDoc {
        config: ckpt.config.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        rng_seed: ckpt.rng_seed,
        bn_epsilon,
        bn_momentum,
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);

    for (name, dims, values) in ckpt.params.leaf_entries() {
        push_record(&mut out, &name, &dims, &values);
    }
    for (name, m) in &ckpt.adam.m {
        push_record(&mut out, &format!("adam.m.{name}"), &[m.len() as u32], m);
    }
    for (name, v) in &ckpt.adam.v {
        push_record(&mut out, &format!("adam.v.{name}"), &[v.len() as u32], v);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            expected: CHECKPOINT_VERSION,
            got: version,
        });
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta: MetaDoc = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;

    let mut records: BTreeMap<String, (Vec<u32>, Vec<f32>)> = BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u32("record name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "record name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = cur.u32("record rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("record dims")?);
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let raw = cur.take(count * 4, "record values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.insert(name, (dims, values));
    }

    // The config fully determines which names must be present.
    let mut expected: Vec<String> = meta.config.leaf_names();
    for leaf in meta.config.trainable_leaf_names() {
        expected.push(format!("adam.m.{leaf}"));
        expected.push(format!("adam.v.{leaf}"));
    }
    let expected_set: std::collections::BTreeSet<&str> =
        expected.iter().map(|s| s.as_str()).collect();
    let got_set: std::collections::BTreeSet<&str> =
        records.keys().map(|s| s.as_str()).collect();
    if expected_set != got_set {
        return Err(CheckpointError::NameSet {
            missing: expected_set
                .difference(&got_set)
                .map(|s| s.to_string())
                .collect(),
            unexpected: got_set
                .difference(&expected_set)
                .map(|s| s.to_string())
                .collect(),
        });
    }

    let take_values = |name: &str, expected_len: usize| -> Result<Vec<f32>, CheckpointError> {
        let (_, values) = &records[name];
        if values.len() != expected_len {
            return Err(CheckpointError::TensorSize {
                name: name.to_string(),
                expected: expected_len,
                got: values.len(),
            });
        }
        Ok(values.clone())
    };
    let kernel = |group: &str, kh: usize, cin: usize, cout: usize| -> Result<ConvKernel<f32>, CheckpointError> {
        let weights = take_values(&format!("{group}.weight"), kh * kh * cin * cout)?;
        let bias = take_values(&format!("{group}.bias"), cout)?;
        Ok(ConvKernel::new(kh, kh, cin, cout, weights, Some(bias))?)
    };

    let c = meta.config.bands;
    let f = meta.config.feature_width;
    let mut blocks = Vec::with_capacity(meta.config.num_residual_blocks);
    for i in 0..meta.config.num_residual_blocks {
        let bn = BatchNormState {
            gamma: take_values(&format!("res{i}.bn.gamma"), f)?,
            beta: take_values(&format!("res{i}.bn.beta"), f)?,
            running_mean: take_values(&format!("res{i}.bn.running_mean"), f)?,
            running_var: take_values(&format!("res{i}.bn.running_var"), f)?,
            epsilon: meta.bn_epsilon,
            momentum: meta.bn_momentum,
        };
        blocks.push(ResidualBlockParams {
            conv1: kernel(&format!("res{i}.conv1"), 3, f, f)?,
            conv2: kernel(&format!("res{i}.conv2"), 3, f, f)?,
            bn,
        });
    }
    let params = ModelParams {
        config: meta.config.clone(),
        unmix_w1: kernel("unmix.w1", 1, c, f)?,
        unmix_w2: kernel("unmix.w2", 1, f, f)?,
        ss_spatial: kernel("ss.spatial", 3, c, f)?,
        ss_spectral: kernel("ss.spectral", 1, c, f)?,
        ss_fuse: kernel("ss.fuse", 1, 2 * f, f)?,
        ssuf_conv: kernel("ssuf.conv", 3, 2 * f, f)?,
        blocks,
        head: kernel("head.out", 3, f, c)?,
    };
    params.validate()?;

    let mut adam = AdamState::zeros_like(&params);
    adam.step = meta.step;
    for leaf in meta.config.trainable_leaf_names() {
        let len = params.leaf_ref(&leaf).expect("trainable leaf exists").len();
        adam.m.insert(leaf.clone(), take_values(&format!("adam.m.{leaf}"), len)?);
        adam.v.insert(leaf.clone(), take_values(&format!("adam.v.{leaf}"), len)?);
    }

    Ok(Checkpoint {
        config: meta.config,
        step: meta.step,
        epoch: meta.epoch,
        rng_seed: meta.rng_seed,
        params,
        adam,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = checkpoint_to_bytes(ckpt);
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &bytes).map_err(|e| CheckpointError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    checkpoint_from_bytes(&bytes)
}
