//! Single-file checkpoints: `MHCK` magic, `u32` version, `u64` header
//! length, a JSON header, then every registry entry as little-endian `f32`
//! values in registry order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{at_path, Error, Result};
use crate::nn::params::{EntryKind, ParamStore, RegistryEntry};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Model configuration, opaque to this module.
    pub config: serde_json::Value,
    /// Arithmetic width the parameters were trained in.
    pub precision: u32,
    pub registry: Vec<RegistryEntry>,
    /// Caller-defined metadata (normalization statistics, training summary).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Decoded checkpoint: header plus one `f32` vector per registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, config: serde_json::Value, extra: serde_json::Value) -> Self {
        let mut registry = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let entries = store
            .params()
            .map(|(n, t)| (n, t, EntryKind::Param))
            .chain(store.buffers().map(|(n, t)| (n, t, EntryKind::Buffer)));
        for (name, tensor, kind) in entries {
            registry.push(RegistryEntry { name: name.to_string(), kind, shape: tensor.shape().to_vec(), offset });
            offset += 4 * tensor.len() as u64;
            tensors.push(tensor.data().iter().map(|v| v.as_f64() as f32).collect());
        }
        Self { header: CheckpointHeader { config, precision: T::BITS, registry, extra }, tensors }
    }

    /// Copies the stored values into `store`, matching entries by name and shape.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.num_params() + store.buffers().count();
        if expected != self.header.registry.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model expects {expected}",
                self.header.registry.len()
            )));
        }
        for ((name, _), entry) in store.params().chain(store.buffers()).zip(&self.header.registry) {
            if name != entry.name {
                return Err(Error::Format(format!(
                    "registry entry {} does not match model parameter {name}",
                    entry.name
                )));
            }
        }
        let n_params = store.num_params();
        let (param_entries, buffer_entries) = self.header.registry.split_at(n_params);
        let (param_values, buffer_values) = self.tensors.split_at(n_params);
        for ((tensor, entry), values) in store.params_mut().zip(param_entries).zip(param_values) {
            copy_entry(entry, EntryKind::Param, values, tensor)?;
        }
        for ((tensor, entry), values) in store.buffers_mut().zip(buffer_entries).zip(buffer_values) {
            copy_entry(entry, EntryKind::Buffer, values, tensor)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.registry.len());
        let mut expected_offset = 0u64;
        for entry in &header.registry {
            if entry.offset != expected_offset {
                return Err(Error::Format(format!(
                    "entry {} has offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Format(format!("payload truncated in entry {}", entry.name)));
            }
            tensors
                .push(payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(at_path(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(at_path(path))?)
    }
}

fn copy_entry<T: Real>(
    entry: &RegistryEntry,
    kind: EntryKind,
    values: &[f32],
    tensor: &mut crate::tensor::Tensor<T>,
) -> Result<()> {
    if entry.kind != kind || entry.shape != tensor.shape() {
        return Err(Error::Format(format!(
            "entry {} ({:?} {:?}) does not fit model tensor {:?}",
            entry.name,
            entry.kind,
            entry.shape,
            tensor.shape()
        )));
    }
    for (d, &v) in tensor.data_mut().iter_mut().zip(values) {
        *d = T::of(v as f64);
    }
    Ok(())
}
