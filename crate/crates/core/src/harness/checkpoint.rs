//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length,
//! the JSON header, then every parameter as a little-endian `f64` in flat
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::MinMaxScaler;
use crate::error::{QcmmError, Result};
use crate::model::{ModelSpec, ParamStore, Segment};

pub const MAGIC: &[u8; 8] = b"QCMMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub layout: Vec<Segment>,
    pub n_params: usize,
    pub scaler_h: Option<MinMaxScaler>,
    pub scaler_l: Option<MinMaxScaler>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

fn bad(msg: impl Into<String>) -> QcmmError {
    QcmmError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(store: &ParamStore, config: &TrainConfig) -> Result<Vec<u8>> {
    let flat = store.flatten();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: store.spec.clone(),
        layout: store.layout(),
        n_params: flat.len(),
        scaler_h: store.scaler_h.clone(),
        scaler_l: store.scaler_l.clone(),
        config: config.clone(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {len} runs past the end of the file")))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let blob = &bytes[end..];
    if blob.len() != 8 * header.n_params {
        return Err(bad(format!(
            "parameter blob holds {} bytes, header declares {} parameters",
            blob.len(),
            header.n_params
        )));
    }
    let mut store = ParamStore::zeros(&header.spec)?;
    if store.layout() != header.layout {
        return Err(bad("parameter layout does not match the model spec"));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    store.set_flat(&flat)?;
    store.scaler_h = header.scaler_h.clone();
    store.scaler_l = header.scaler_l.clone();
    Ok(Checkpoint { header, store })
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, config: &TrainConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(store, config)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        QcmmError::Checkpoint(msg) => bad(format!("{}: {msg}", path.display())),
        other => other,
    })
}
