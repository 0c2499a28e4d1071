//! Checkpoint files: a JSON manifest holding each network's architecture
//! descriptor plus its parameters and Adam moments as base64-encoded
//! little-endian 64-bit floats. Round trips are bit-exact.

use super::{AdamState, Network, NetworkSpec, NnError, Tensor};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    step: u64,
    seed: u64,
    config_hash: String,
    networks: Vec<NetworkEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    descriptor: NetworkSpec,
    params_b64: String,
    adam_m_b64: String,
    adam_v_b64: String,
    adam_t: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

fn encode_tensors(tensors: &[Tensor]) -> String {
    let mut bytes = Vec::new();
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    B64.encode(bytes)
}

fn decode_into_shapes(b64: &str, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>, NnError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| NnError::InvalidCheckpoint(format!("base64: {e}")))?;
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(NnError::InvalidCheckpoint(format!(
            "blob holds {} bytes, descriptor needs {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let data = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(shape, data));
        off += 8 * n;
    }
    Ok(tensors)
}

fn param_shapes(spec: &NetworkSpec) -> Vec<Vec<usize>> {
    spec.heads
        .iter()
        .flat_map(|h| h.layers.iter())
        .chain(spec.trunk.iter())
        .flat_map(super::layer_param_shapes)
        .collect()
}

pub fn save_checkpoint(
    path: &Path,
    nets: &[(&str, &Network)],
    step: u64,
    seed: u64,
    config_hash: &str,
) -> Result<(), NnError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        seed,
        config_hash: config_hash.to_string(),
        networks: nets
            .iter()
            .map(|(name, net)| NetworkEntry {
                name: name.to_string(),
                descriptor: net.spec().clone(),
                params_b64: encode_tensors(net.params()),
                adam_m_b64: encode_tensors(&net.adam_state().m),
                adam_v_b64: encode_tensors(&net.adam_state().v),
                adam_t: net.adam_state().t,
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    Ok(std::fs::write(path, bytes)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Network)>, CheckpointMeta), NnError> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(NnError::FormatVersion {
            found: file.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let mut nets = Vec::with_capacity(file.networks.len());
    for entry in file.networks {
        let shapes = param_shapes(&entry.descriptor);
        let params = decode_into_shapes(&entry.params_b64, &shapes)?;
        let m = decode_into_shapes(&entry.adam_m_b64, &shapes)?;
        let v = decode_into_shapes(&entry.adam_v_b64, &shapes)?;
        let net = Network::from_parts(
            entry.descriptor,
            params,
            AdamState { m, v, t: entry.adam_t },
        )?;
        nets.push((entry.name, net));
    }
    Ok((
        nets,
        CheckpointMeta {
            step: file.step,
            seed: file.seed,
            config_hash: file.config_hash,
        },
    ))
}

/// Finds a named network in a loaded checkpoint and verifies it against the
/// expected architecture.
pub fn take_named(
    nets: Vec<(String, Network)>,
    name: &str,
    expected: &NetworkSpec,
) -> Result<Network, NnError> {
    for (n, net) in nets {
        if n == name {
            if net.spec() != expected {
                return Err(NnError::ArchMismatch(format!(
                    "checkpoint network `{name}` descriptor {:?} does not match expected {:?}",
                    net.spec(),
                    expected
                )));
            }
            return Ok(net);
        }
    }
    Err(NnError::InvalidCheckpoint(format!(
        "checkpoint has no network named `{name}`"
    )))
}
