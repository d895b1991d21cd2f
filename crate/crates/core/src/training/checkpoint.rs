//! Checkpoint directories: `manifest.json` plus `params.bin`.
//!
//! `params.bin` holds, for every parameter in name order, its value followed
//! by the two Adam moments, each as little-endian `f32`. The manifest
//! records each parameter's shape and the byte offset of its value.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamEntry, ParameterStore, Tensor};
use crate::scalar::Scalar;
use crate::training::{MetricPoint, RunConfig};

pub const CHECKPOINT_FORMAT: &str = "rehearsal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the value; `m` and `v` follow contiguously.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub global_step: u64,
    pub metric_history: Vec<MetricPoint>,
    pub params: Vec<ParamRecord>,
}

fn push_f32<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

pub fn save_checkpoint<T: Scalar>(
    store: &ParameterStore<T>,
    config: &RunConfig,
    metric_history: &[MetricPoint],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 12);
    let mut params = Vec::with_capacity(store.len());
    for (name, entry) in store.entries() {
        params.push(ParamRecord {
            name: name.to_string(),
            shape: entry.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        push_f32(&mut blob, &entry.value);
        push_f32(&mut blob, &entry.adam.m);
        push_f32(&mut blob, &entry.adam.v);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        global_step: store.global_step(),
        metric_history: metric_history.to_vec(),
        params,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

fn read_f32<T: Scalar>(blob: &[u8], start: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = blob[start..start + 4 * n]
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

/// Reads a checkpoint and checks it against the parameter layout of its own
/// model configuration. Nothing is returned unless every check passes.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ParameterStore<T>, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
            manifest.format, manifest.version
        )));
    }
    let layout = manifest.config.model.init_params::<f32>(0)?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut store = ParameterStore::new();
    let mut seen = BTreeSet::new();
    let mut expected_len = 0usize;
    for rec in &manifest.params {
        let want = layout
            .value(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", rec.name)))?;
        if want.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, the configuration implies {:?}",
                rec.name,
                rec.shape,
                want.shape()
            )));
        }
        let n: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        if start + 12 * n > blob.len() {
            return Err(Error::Checkpoint(format!(
                "truncated blob at parameter {}",
                rec.name
            )));
        }
        let entry = ParamEntry {
            value: read_f32(&blob, start, &rec.shape)?,
            adam: AdamState {
                m: read_f32(&blob, start + 4 * n, &rec.shape)?,
                v: read_f32(&blob, start + 8 * n, &rec.shape)?,
            },
        };
        store
            .insert_entry(&rec.name, entry)
            .map_err(|_| Error::Checkpoint(format!("parameter {} listed twice", rec.name)))?;
        seen.insert(rec.name.as_str());
        expected_len += 12 * n;
    }
    if let Some(missing) = layout.names().find(|n| !seen.contains(n)) {
        return Err(Error::Checkpoint(format!("missing parameter {missing}")));
    }
    if blob.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, the manifest describes {expected_len}",
            blob.len()
        )));
    }
    store.set_global_step(manifest.global_step);
    Ok((store, manifest))
}
