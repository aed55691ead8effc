//! Checkpoint directory: `manifest.json` plus `state.bin`.
//!
//! The blob is the concatenation of little-endian IEEE-754 values of every
//! listed tensor, in manifest order, without gaps. Tensors are named
//! `param/<name>`, `adam.m/<name>`, `adam.v/<name>`, `momentum/<name>`
//! (averaged parameters only) and `queue.{video,text}/<i>/{cls,tokens}`.
//! The manifest carries the SHA-256 of the blob.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twbert_core::alignment::QueueEntry;
use twbert_core::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::train::{LossLog, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "state.bin";
pub const LOSS_LOG: &str = "loss.csv";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint holds {found}-bit values, run uses {expected}-bit")]
    Precision { found: u32, expected: u32 },
    #[error("blob is {found} bytes, manifest expects {expected}")]
    Length { found: u64, expected: u64 },
    #[error("blob checksum mismatch (manifest {expected}, blob {found})")]
    Checksum { expected: String, found: String },
    #[error("tensor layout error: {0}")]
    Layout(String),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: u32,
    pub seed: u64,
    pub step: usize,
    pub optimizer_step: usize,
    pub config: RunConfig,
    pub blob: String,
    pub blob_bytes: u64,
    pub sha256: String,
    /// Sample ids of the queued entries, oldest first.
    pub video_queue: Vec<u64>,
    pub text_queue: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct BlobWriter<T> {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> BlobWriter<T> {
    fn push(&mut self, name: String, t: &Tensor<T>) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.bytes.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut self.bytes);
        }
    }
}

fn queue_tensors<T: Scalar>(
    w: &mut BlobWriter<T>,
    label: &str,
    entries: &[&QueueEntry<T>],
) -> Result<(), CheckpointError> {
    for (i, e) in entries.iter().enumerate() {
        let cls = Tensor::new(vec![e.cls.len()], e.cls.clone())
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        w.push(format!("queue.{label}/{i}/cls"), &cls);
        w.push(format!("queue.{label}/{i}/tokens"), &e.tokens);
    }
    Ok(())
}

/// Writes `state` to `dir`, replacing any previous checkpoint there.
pub fn save<T: Scalar>(state: &TrainState<T>, dir: &Path) -> Result<(), CheckpointError> {
    let mut w = BlobWriter::<T> {
        bytes: Vec::new(),
        entries: Vec::new(),
        _t: std::marker::PhantomData,
    };
    let store = &state.model.store;
    for p in store.iter() {
        w.push(format!("param/{}", p.name), &p.value);
    }
    for (p, m) in store.iter().zip(&state.opt.m) {
        w.push(format!("adam.m/{}", p.name), m);
    }
    for (p, v) in store.iter().zip(&state.opt.v) {
        w.push(format!("adam.v/{}", p.name), v);
    }
    for &id in &state.momentum.tracked {
        let p = state.momentum.store.get(id);
        w.push(format!("momentum/{}", p.name), &p.value);
    }
    let vq: Vec<_> = state.momentum.video_queue.iter().collect();
    let tq: Vec<_> = state.momentum.text_queue.iter().collect();
    queue_tensors(&mut w, "video", &vq)?;
    queue_tensors(&mut w, "text", &tq)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::BITS,
        seed: state.config.seed,
        step: state.step,
        optimizer_step: state.opt.step,
        config: state.config.clone(),
        blob: BLOB.into(),
        blob_bytes: w.bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&w.bytes)),
        video_queue: vq.iter().map(|e| e.sample).collect(),
        text_queue: tq.iter().map(|e| e.sample).collect(),
        tensors: w.entries,
    };
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    std::fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    std::fs::write(tmp.join(BLOB), &w.bytes).map_err(io(&tmp))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(tmp.join(MANIFEST), json).map_err(io(&tmp))?;
    std::fs::write(tmp.join(LOSS_LOG), state.log.to_csv()).map_err(io(&tmp))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::rename(&tmp, dir).map_err(io(dir))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    // check the version before the rest of the schema
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version { found: found as u32 });
    }
    serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))
}

/// Loads and verifies a checkpoint written by [`save`].
pub fn load<T: Scalar>(dir: &Path) -> Result<TrainState<T>, CheckpointError> {
    let m = read_manifest(dir)?;
    if m.precision != T::BITS {
        return Err(CheckpointError::Precision {
            found: m.precision,
            expected: T::BITS,
        });
    }
    let blob_path = dir.join(&m.blob);
    let bytes = std::fs::read(&blob_path).map_err(io(&blob_path))?;
    if bytes.len() as u64 != m.blob_bytes {
        return Err(CheckpointError::Length {
            found: bytes.len() as u64,
            expected: m.blob_bytes,
        });
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != m.sha256 {
        return Err(CheckpointError::Checksum {
            expected: m.sha256.clone(),
            found: digest,
        });
    }
    let width = (T::BITS / 8) as u64;
    let mut tensors: HashMap<&str, Tensor<T>> = HashMap::new();
    let mut cursor = 0u64;
    for e in &m.tensors {
        if e.offset != cursor {
            return Err(CheckpointError::Layout(format!(
                "`{}` starts at byte {} but the previous tensor ends at {cursor}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = cursor + n as u64 * width;
        if end > bytes.len() as u64 {
            return Err(CheckpointError::Layout(format!("`{}` runs past the blob", e.name)));
        }
        let data = bytes[cursor as usize..end as usize]
            .chunks_exact(width as usize)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| CheckpointError::Layout(format!("`{}`: {err}", e.name)))?;
        if tensors.insert(e.name.as_str(), t).is_some() {
            return Err(CheckpointError::Layout(format!("`{}` listed twice", e.name)));
        }
        cursor = end;
    }
    if cursor != bytes.len() as u64 {
        return Err(CheckpointError::Layout(format!(
            "tensors cover {cursor} of {} bytes",
            bytes.len()
        )));
    }
    let mut state = TrainState::<T>::new(m.config.clone())
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let n_params = state.model.store.len();
    for i in 0..n_params {
        let id = state.model.store.ids().nth(i).expect("id in range");
        let (name, shape) = {
            let p = state.model.store.get(id);
            (p.name.clone(), p.value.shape().to_vec())
        };
        state.model.store.get_mut(id).value = take(&mut tensors, format!("param/{name}"), &shape)?;
        state.opt.m[i] = take(&mut tensors, format!("adam.m/{name}"), &shape)?;
        state.opt.v[i] = take(&mut tensors, format!("adam.v/{name}"), &shape)?;
        // untracked momentum entries keep their initial copy and are never read
        if state.momentum.tracked.contains(&id) {
            state.momentum.store.get_mut(id).value = take(&mut tensors, format!("momentum/{name}"), &shape)?;
        }
    }
    let d_c = m.config.d_c;
    for (label, ids, queue) in [
        ("video", &m.video_queue, &mut state.momentum.video_queue),
        ("text", &m.text_queue, &mut state.momentum.text_queue),
    ] {
        queue.clear();
        for (i, &sample) in ids.iter().enumerate() {
            let cls = take(&mut tensors, format!("queue.{label}/{i}/cls"), &[d_c])?;
            let key = format!("queue.{label}/{i}/tokens");
            let tokens = tensors
                .remove(key.as_str())
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor `{key}`")))?;
            if tokens.cols() != d_c {
                return Err(CheckpointError::Mismatch(format!("`{key}` has width {}", tokens.cols())));
            }
            queue.push(QueueEntry {
                sample,
                cls: cls.into_data(),
                tokens,
            });
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Mismatch(format!("unexpected tensor `{extra}`")));
    }
    state.step = m.step;
    state.opt.step = m.optimizer_step;
    let log_path = dir.join(LOSS_LOG);
    if log_path.exists() {
        let text = std::fs::read_to_string(&log_path).map_err(io(&log_path))?;
        state.log = LossLog::from_csv(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    }
    Ok(state)
}

fn take<T: Scalar>(
    tensors: &mut HashMap<&str, Tensor<T>>,
    name: String,
    shape: &[usize],
) -> Result<Tensor<T>, CheckpointError> {
    let t = tensors
        .remove(name.as_str())
        .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor `{name}`")))?;
    if t.shape() != shape {
        return Err(CheckpointError::Mismatch(format!(
            "`{name}` has shape {:?}, config implies {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
