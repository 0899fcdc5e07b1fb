//! Binary checkpoint format.
//!
//! Layout: magic `MLRS` | format version (u32 LE) | metadata length (u64 LE)
//! | metadata JSON (space-padded to an 8-byte boundary) | payload. The
//! metadata carries the model config, the adapter config when one is
//! installed, the step, scalar metrics, and a tensor table whose offsets are
//! relative to the payload start; tensor data is raw little-endian f64,
//! row-major, 8-byte aligned. Writes go to a temporary file that is renamed
//! into place, so a crash never leaves a half-written checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{apply_adapters, AdapterConfig};
use crate::linalg::Matrix;
use crate::nn::{Model, NnError, TransformerConfig};

pub const MAGIC: [u8; 4] = *b"MLRS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated checkpoint: {what} needs {needed} bytes, file has {available}")]
    Truncated { what: String, needed: u64, available: u64 },
    #[error("tensor `{0}` in file does not exist in the model")]
    UnknownTensor(String),
    #[error("model tensor `{0}` is missing from the file")]
    MissingTensor(String),
    #[error("tensor `{name}` declares dtype `{dtype}`; only f64 payloads are produced")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` shape {rows}x{cols} disagrees with byte length {len}")]
    TensorLength { name: String, rows: usize, cols: usize, len: u64 },
    #[error("tensor `{name}` shape {rows}x{cols} does not match model shape {expected_rows}x{expected_cols}")]
    TensorShape { name: String, rows: usize, cols: usize, expected_rows: usize, expected_cols: usize },
    #[error("file has no adapter config; cannot install adapters from it")]
    NoAdapterConfig,
    #[error("base model config does not match the config stored in the adapter file")]
    ModelConfigMismatch,
    #[error("metadata is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("adapter reconstruction failed: {0}")]
    Adapter(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    model: TransformerConfig,
    adapter: Option<AdapterConfig>,
    step: u64,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

/// Everything stored beside the tensors.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub model: TransformerConfig,
    pub adapter: Option<AdapterConfig>,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

fn write_file(
    model: &Model,
    adapter: Option<&AdapterConfig>,
    step: u64,
    metrics: &BTreeMap<String, f64>,
    names: impl Iterator<Item = String>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for name in names {
        let value = &model.param(&name)?.value;
        let offset = payload.len() as u64;
        for &x in value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            dtype: "f64".to_string(),
            shape: [value.rows(), value.cols()],
            offset,
            len: (value.data().len() * 8) as u64,
        });
    }
    let meta = Metadata {
        model: model.config().clone(),
        adapter: adapter.cloned(),
        step,
        metrics: metrics.clone(),
        tensors: entries,
    };
    let mut meta_bytes = serde_json::to_vec(&meta)?;
    // Pad with JSON whitespace so the payload starts 8-byte aligned.
    while (HEADER_LEN as usize + meta_bytes.len()) % 8 != 0 {
        meta_bytes.push(b' ');
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&meta_bytes)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes every parameter of the model.
pub fn save_checkpoint(
    model: &Model,
    adapter: Option<&AdapterConfig>,
    step: u64,
    metrics: &BTreeMap<String, f64>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let names: Vec<String> = model.params().map(|(n, _)| n.to_string()).collect();
    write_file(model, adapter, step, metrics, names.into_iter(), path)
}

/// Writes only the adapter factors, producing a file shareable without the
/// base weights.
pub fn save_adapter_checkpoint(
    model: &Model,
    adapter: &AdapterConfig,
    step: u64,
    metrics: &BTreeMap<String, f64>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let names: Vec<String> = model
        .attachments()
        .values()
        .flat_map(|att| [att.a_name.clone(), att.b_name.clone()])
        .collect();
    write_file(model, Some(adapter), step, metrics, names.into_iter(), path)
}

fn parse_header(bytes: &[u8]) -> Result<(Metadata, u64), CheckpointError> {
    let available = bytes.len() as u64;
    if available < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            what: "header".to_string(),
            needed: HEADER_LEN,
            available,
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(CheckpointError::BadMagic { found });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_base = HEADER_LEN + meta_len;
    if available < payload_base {
        return Err(CheckpointError::Truncated {
            what: "metadata".to_string(),
            needed: payload_base,
            available,
        });
    }
    let meta: Metadata =
        serde_json::from_slice(&bytes[HEADER_LEN as usize..payload_base as usize])?;
    Ok((meta, payload_base))
}

fn read_tensor(
    bytes: &[u8],
    payload_base: u64,
    entry: &TensorEntry,
) -> Result<Matrix, CheckpointError> {
    if entry.dtype != "f64" {
        return Err(CheckpointError::UnsupportedDtype {
            name: entry.name.clone(),
            dtype: entry.dtype.clone(),
        });
    }
    let [rows, cols] = entry.shape;
    if entry.len != (rows * cols * 8) as u64 {
        return Err(CheckpointError::TensorLength {
            name: entry.name.clone(),
            rows,
            cols,
            len: entry.len,
        });
    }
    let start = payload_base + entry.offset;
    let end = start + entry.len;
    if end > bytes.len() as u64 {
        return Err(CheckpointError::Truncated {
            what: format!("tensor `{}`", entry.name),
            needed: end,
            available: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = bytes[start as usize..end as usize]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
        .map_err(|_| CheckpointError::TensorLength { name: entry.name.clone(), rows, cols, len: entry.len })
}

fn install_tensor(
    model: &mut Model,
    entry: &TensorEntry,
    value: Matrix,
) -> Result<(), CheckpointError> {
    let param = model
        .param(&entry.name)
        .map_err(|_| CheckpointError::UnknownTensor(entry.name.clone()))?;
    let (er, ec) = param.value.shape();
    if (entry.shape[0], entry.shape[1]) != (er, ec) {
        return Err(CheckpointError::TensorShape {
            name: entry.name.clone(),
            rows: entry.shape[0],
            cols: entry.shape[1],
            expected_rows: er,
            expected_cols: ec,
        });
    }
    model.set_param_value(&entry.name, value)?;
    Ok(())
}

/// Rebuilds the full model stored at `path`. When the file carries an
/// adapter config, the returned model has its attachments installed and only
/// adapter factors trainable, exactly as at save time.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path)?;
    let (meta, payload_base) = parse_header(&bytes)?;
    let skeleton = Model::new(meta.model.clone())?;
    let mut model = match &meta.adapter {
        Some(cfg) => {
            apply_adapters(skeleton, cfg).map_err(|e| CheckpointError::Adapter(e.to_string()))?.0
        }
        None => skeleton,
    };
    let mut seen = std::collections::BTreeSet::new();
    for entry in &meta.tensors {
        let value = read_tensor(&bytes, payload_base, entry)?;
        install_tensor(&mut model, entry, value)?;
        seen.insert(entry.name.clone());
    }
    if let Some(missing) = model.params().map(|(n, _)| n).find(|n| !seen.contains(*n)) {
        return Err(CheckpointError::MissingTensor(missing.to_string()));
    }
    Ok((
        model,
        CheckpointMeta { model: meta.model, adapter: meta.adapter, step: meta.step, metrics: meta.metrics },
    ))
}

/// Reassembles a full model from a base model plus an adapter-only file.
///
/// The frozen split is recomputed from the base weights (deterministically,
/// so it is bit-identical to the one computed at training time) and the
/// trained factors are then loaded over the freshly initialized ones.
pub fn load_adapter_into(
    base: Model,
    path: &Path,
) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path)?;
    let (meta, payload_base) = parse_header(&bytes)?;
    let cfg = meta.adapter.clone().ok_or(CheckpointError::NoAdapterConfig)?;
    if *base.config() != meta.model {
        return Err(CheckpointError::ModelConfigMismatch);
    }
    let (mut model, _) =
        apply_adapters(base, &cfg).map_err(|e| CheckpointError::Adapter(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for entry in &meta.tensors {
        let value = read_tensor(&bytes, payload_base, entry)?;
        install_tensor(&mut model, entry, value)?;
        seen.insert(entry.name.clone());
    }
    for att in model.attachments().values() {
        for name in [&att.a_name, &att.b_name] {
            if !seen.contains(name) {
                return Err(CheckpointError::MissingTensor(name.clone()));
            }
        }
    }
    Ok((
        model,
        CheckpointMeta { model: meta.model, adapter: meta.adapter, step: meta.step, metrics: meta.metrics },
    ))
}

/// Reads only the metadata block.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let bytes = fs::read(path)?;
    let (meta, _) = parse_header(&bytes)?;
    Ok(CheckpointMeta {
        model: meta.model,
        adapter: meta.adapter,
        step: meta.step,
        metrics: meta.metrics,
    })
}
