//! Checkpoints: a binary weight file plus a JSON descriptor.
//!
//! `weights.bin` layout: 8-byte magic, u32 version, u64 parameter count, u64 running-stat
//! count, then both f32 arrays, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{io_err, Error, Result};
use crate::loss::LossSpec;
use crate::volume::io::{decode_f32, encode_f32};
use crate::volume::HeatmapConfig;

const MAGIC: &[u8; 8] = b"GLIPCKPT";
const VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DESCRIPTOR_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network_config: NetworkConfig,
    pub loss_spec: LossSpec,
    pub heatmap: HeatmapConfig,
    pub fold_index: Option<usize>,
    pub epoch: usize,
}

pub fn save_checkpoint(dir: &Path, net: &Network, meta: &CheckpointMeta) -> Result<()> {
    if &meta.network_config != net.config() {
        return Err(Error::InvalidArgument("checkpoint descriptor does not match the network".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::with_capacity(28 + 4 * (net.params.len() + net.running.len()));
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(net.running.len() as u64).to_le_bytes());
    bytes.extend(encode_f32(&net.params));
    bytes.extend(encode_f32(&net.running));
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, bytes).map_err(io_err(&weights))?;
    let desc = dir.join(DESCRIPTOR_FILE);
    fs::write(&desc, serde_json::to_string_pretty(meta)?).map_err(io_err(&desc))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointMeta)> {
    let desc = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&desc).map_err(io_err(&desc))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: desc.clone(), message: e.to_string() })?;
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights).map_err(io_err(&weights))?;
    let bad = |message: &str| Error::Format { path: weights.clone(), message: message.into() };
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint weight file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: weights, version: version as u64 });
    }
    let n_params = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n_running = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expected = 28 + 4 * (n_params + n_running);
    if bytes.len() as u64 != expected {
        return Err(Error::ByteCount { path: weights, expected, actual: bytes.len() as u64 });
    }
    let split = 28 + 4 * n_params as usize;
    let mut net = Network::build(meta.network_config.clone())?;
    net.set_state(decode_f32(&bytes[28..split]), decode_f32(&bytes[split..]))?;
    Ok((net, meta))
}
