//! Single-file checkpoint container: a magic tag, a JSON header describing
//! the architecture, schedule and tensor layout, then the raw little-endian
//! `f64` payload (parameters followed by the Adam moments). All interesting
//! failure modes — truncation, bad magic, version drift, shape mismatch —
//! reject cleanly without producing a partial model.

use super::adam::Adam;
use crate::backbone::{BackboneModel, ModelConfig};
use crate::error::{DmsmError, Result};
use crate::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"DMSMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    schedule: ScheduleConfig,
    step: u64,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything a resumed run needs.
pub struct LoadedCheckpoint {
    pub model: BackboneModel,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl LoadedCheckpoint {
    /// Reject checkpoints whose architecture does not match the requested
    /// configuration (e.g. a narrower trunk).
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        if self.model.config() != expected {
            return Err(DmsmError::Checkpoint(format!(
                "architecture mismatch: checkpoint was built for {:?}, run requests {:?}",
                self.model.config(),
                expected
            )));
        }
        Ok(())
    }
}

/// Serialize model + optimizer state to bytes.
pub fn checkpoint_to_bytes(
    model: &BackboneModel,
    adam: &Adam,
    step: u64,
    schedule: &ScheduleConfig,
) -> Result<Vec<u8>> {
    let params = model.collect_params();
    let (m, v) = adam.moments();
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[f64],
                    tensors: &mut Vec<TensorEntry>,
                    payload: &mut Vec<f64>| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            len: data.len() as u64,
        });
        payload.extend_from_slice(data);
    };
    for (name, t) in &params {
        push(name.clone(), t.shape.clone(), &t.data, &mut tensors, &mut payload);
    }
    for (i, (name, t)) in params.iter().enumerate() {
        push(format!("adam.m.{name}"), t.shape.clone(), &m[i], &mut tensors, &mut payload);
    }
    for (i, (name, t)) in params.iter().enumerate() {
        push(format!("adam.v.{name}"), t.shape.clone(), &v[i], &mut tensors, &mut payload);
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        schedule: *schedule,
        step,
        adam_t: adam.step_count(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for x in &payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &BackboneModel,
    adam: &Adam,
    step: u64,
    schedule: &ScheduleConfig,
) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, adam, step, schedule)?;
    // Write-then-rename so a crash never leaves a half-written checkpoint
    // under the published name.
    let tmp = path.with_extension("ckpt.tmp");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Decode a checkpoint from bytes, validating structure and shapes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let fail = |msg: &str| DmsmError::Checkpoint(msg.to_string());
    if bytes.len() < 20 {
        return Err(fail("file too short for header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DmsmError::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_at = 20usize.checked_add(header_len).ok_or_else(|| fail("header length overflow"))?;
    if bytes.len() < payload_at {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..payload_at])
        .map_err(|e| DmsmError::Checkpoint(format!("header parse failed: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail("header format_version disagrees with container"));
    }
    header.model.validate().map_err(|e| DmsmError::Checkpoint(format!("bad model config: {e}")))?;

    let payload_bytes = &bytes[payload_at..];
    if payload_bytes.len() % 8 != 0 {
        return Err(fail("payload is not a whole number of f64 values"));
    }
    let payload_len = payload_bytes.len() / 8;
    let expected_len: u64 = header.tensors.iter().map(|t| t.len).sum();
    if expected_len != payload_len as u64 {
        return Err(DmsmError::Checkpoint(format!(
            "truncated or oversized payload: header declares {expected_len} values, file holds {payload_len}"
        )));
    }

    let fetch = |entry: &TensorEntry| -> Result<Vec<f64>> {
        let start = entry
            .offset
            .checked_mul(8)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| fail("tensor offset overflow"))?;
        let nbytes = entry
            .len
            .checked_mul(8)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| fail("tensor length overflow"))?;
        let end = start.checked_add(nbytes).ok_or_else(|| fail("tensor extent overflow"))?;
        if end > payload_bytes.len() {
            return Err(DmsmError::Checkpoint(format!(
                "tensor {} extends past payload end",
                entry.name
            )));
        }
        let declared: usize = entry.shape.iter().product();
        if declared as u64 != entry.len {
            return Err(DmsmError::Checkpoint(format!(
                "tensor {}: shape {:?} disagrees with length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        Ok(payload_bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut model = BackboneModel::zeros(&header.model);
    let names: Vec<(String, Vec<usize>)> = model
        .collect_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    let lookup = |name: &str| -> Result<&TensorEntry> {
        header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| DmsmError::Checkpoint(format!("missing tensor {name}")))
    };

    let mut param_data = Vec::with_capacity(names.len());
    let mut adam_m = Vec::with_capacity(names.len());
    let mut adam_v = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        for (prefix, sink) in [
            ("", &mut param_data),
            ("adam.m.", &mut adam_m),
            ("adam.v.", &mut adam_v),
        ] {
            let entry = lookup(&format!("{prefix}{name}"))?;
            if &entry.shape != shape {
                return Err(DmsmError::Checkpoint(format!(
                    "tensor {prefix}{name}: expected shape {shape:?} for this architecture, found {:?}",
                    entry.shape
                )));
            }
            sink.push(fetch(entry)?);
        }
    }
    if header.tensors.len() != 3 * names.len() {
        return Err(DmsmError::Checkpoint(format!(
            "unexpected tensor count {} (architecture wants {})",
            header.tensors.len(),
            3 * names.len()
        )));
    }

    model.visit_params_mut(|i, t| {
        t.data.copy_from_slice(&param_data[i]);
    });

    Ok(LoadedCheckpoint {
        model,
        schedule: header.schedule,
        step: header.step,
        adam_t: header.adam_t,
        adam_m,
        adam_v,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// FNV-1a content hash, recorded in reconstruction manifests so a run can be
/// tied to the exact checkpoint that produced it.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
