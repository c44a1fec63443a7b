//! Model checkpoints.
//!
//! Layout: 4-byte magic "DMRS", little-endian u32 format version, little-
//! endian u64 manifest length, UTF-8 JSON manifest (architecture, network
//! configuration, parameter table with shapes and byte offsets), then the
//! raw payload: every tensor as little-endian f32 regardless of the compute
//! precision, parameters first, then batchnorm running statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::layers::{enumerate_layers, LayerSpec};
use crate::net::{ArchKind, ModelParams, NetworkConfig};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMRS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: ArchKind,
    config: NetworkConfig,
    payload_dtype: String,
    entries: Vec<ManifestEntry>,
}

fn tensor_bytes(shape: &[usize]) -> u64 {
    4 * shape.iter().product::<usize>() as u64
}

/// Serialize a model. The payload is single precision; loading therefore
/// reproduces an f32 model bit-exactly.
pub fn save_checkpoint<E: Element>(
    arch: ArchKind,
    config: &NetworkConfig,
    params: &ModelParams<E>,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, kind: EntryKind, t: &Tensor<E>, payload: &mut Vec<u8>, entries: &mut Vec<ManifestEntry>| {
        entries.push(ManifestEntry {
            name,
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    };
    for (name, t) in params.iter() {
        push(name.clone(), EntryKind::Param, t, &mut payload, &mut entries);
    }
    for (name, rs) in params.running_iter() {
        push(name.clone(), EntryKind::RunningMean, &rs.mean, &mut payload, &mut entries);
        push(name.clone(), EntryKind::RunningVar, &rs.var, &mut payload, &mut entries);
    }
    let manifest = Manifest {
        arch,
        config: config.clone(),
        payload_dtype: "f32".to_string(),
        entries,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::integrity(format!("manifest encode: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + manifest_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Expected manifest sequence for a configuration, mirroring save order.
fn expected_entries(arch: ArchKind, cfg: &NetworkConfig) -> Vec<(String, EntryKind, Vec<usize>)> {
    let mut params: Vec<(String, Vec<usize>)> = Vec::new();
    let mut running: Vec<(String, usize)> = Vec::new();
    for layer in enumerate_layers(arch, cfg) {
        match layer {
            LayerSpec::Conv { name, cin, cout, k } => {
                params.push((format!("{name}.w"), vec![cout, cin, k, k]));
                params.push((format!("{name}.b"), vec![cout]));
            }
            LayerSpec::ConvT { name, cin, cout } => {
                params.push((format!("{name}.w"), vec![cin, cout, 1, 1]));
                params.push((format!("{name}.b"), vec![cout]));
            }
            LayerSpec::Bn { name, c } => {
                params.push((format!("{name}.gamma"), vec![c]));
                params.push((format!("{name}.beta"), vec![c]));
                running.push((name, c));
            }
        }
    }
    let mut out: Vec<(String, EntryKind, Vec<usize>)> = params
        .into_iter()
        .map(|(n, s)| (n, EntryKind::Param, s))
        .collect();
    for (n, c) in running {
        out.push((n.clone(), EntryKind::RunningMean, vec![c]));
        out.push((n, EntryKind::RunningVar, vec![c]));
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchKind, NetworkConfig, ModelParams<f32>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(format!("{}: too short for a checkpoint", path.display())));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "{}: checkpoint format version {version} is not readable by this build (expected {CHECKPOINT_VERSION}); \
             re-save the model with a matching tool version",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::integrity(format!(
            "{}: manifest claims {manifest_len} bytes, file holds {}",
            path.display(),
            bytes.len() - 16
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::format(format!("{}: manifest parse error: {e}", path.display())))?;
    let payload = &bytes[16 + manifest_len..];

    // Offsets must tile the payload exactly, in order.
    let mut cursor = 0u64;
    for e in &manifest.entries {
        if e.offset != cursor {
            return Err(Error::integrity(format!(
                "{}: entry '{}' at offset {} but expected {cursor} (manifest must tile the payload)",
                path.display(),
                e.name,
                e.offset
            )));
        }
        cursor += tensor_bytes(&e.shape);
    }
    if cursor != payload.len() as u64 {
        return Err(Error::integrity(format!(
            "{}: truncated payload: expected {cursor} bytes, found {}",
            path.display(),
            payload.len()
        )));
    }

    // The manifest must describe exactly the configured architecture.
    let expected = expected_entries(manifest.arch, &manifest.config);
    if expected.len() != manifest.entries.len() {
        return Err(Error::config(format!(
            "{}: checkpoint holds {} tensors but configuration implies {}",
            path.display(),
            manifest.entries.len(),
            expected.len()
        )));
    }
    for (e, (name, kind, shape)) in manifest.entries.iter().zip(&expected) {
        if &e.name != name || e.kind != *kind || &e.shape != shape {
            return Err(Error::config(format!(
                "{}: checkpoint entry '{}' {:?} {:?} does not match configuration ('{}' {:?} {:?})",
                path.display(),
                e.name,
                e.kind,
                e.shape,
                name,
                kind,
                shape
            )));
        }
    }

    let read_tensor = |e: &ManifestEntry| -> Result<Tensor<f32>> {
        let start = e.offset as usize;
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for chunk in payload[start..start + 4 * n].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Tensor::from_vec(&e.shape, data)
    };

    let mut params: ModelParams<f32> = ModelParams::new();
    for e in &manifest.entries {
        match e.kind {
            EntryKind::Param => params.insert(e.name.clone(), read_tensor(e)?)?,
            EntryKind::RunningMean => {
                params.insert_running(e.name.clone(), e.shape[0])?;
                params.running_mut(&e.name)?.mean = read_tensor(e)?;
            }
            EntryKind::RunningVar => {
                params.running_mut(&e.name)?.var = read_tensor(e)?;
            }
        }
    }
    if !params.all_finite() {
        return Err(Error::integrity(format!(
            "{}: checkpoint holds non-finite parameter values",
            path.display()
        )));
    }
    Ok((manifest.arch, manifest.config, params))
}
