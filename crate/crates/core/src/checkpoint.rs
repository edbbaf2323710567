//! Checkpoint archives: a text manifest plus one little-endian f32 blob.
//!
//! A checkpoint is a directory holding
//! - `manifest.txt`: one `path<TAB>d0,d1,..<TAB>byte_offset` line per parameter,
//!   sorted by path;
//! - `weights.bin`: the values of every parameter back to back;
//! - `model.cfg`: the model configuration as `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::{format_kv, parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::{FineMaskModel, TrainMode};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "model.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub path: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

/// Path-ordered parameter values as stored on disk.
pub type ParamTable = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

pub fn store_table(store: &ParamStore) -> Result<ParamTable> {
    let mut out = BTreeMap::new();
    for (path, var) in store.entries() {
        let t = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
        let v = t.to_vec1::<f32>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite values in parameter {path}")));
        }
        out.insert(path, (var.dims().to_vec(), v));
    }
    Ok(out)
}

pub fn encode_archive(table: &ParamTable) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (path, (dims, values)) in table {
        let shape = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        manifest.push_str(&format!("{path}\t{shape}\t{}\n", blob.len()));
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ParamRecord>> {
    let mut out: Vec<ParamRecord> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Checkpoint(format!("manifest line {}: {what}", no + 1));
        let mut it = line.split('\t');
        let (Some(path), Some(shape), Some(offset), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        let dims = if shape.is_empty() {
            Vec::new()
        } else {
            shape.split(',').map(|d| d.parse::<usize>().map_err(|_| bad("bad shape"))).collect::<Result<Vec<_>>>()?
        };
        let offset = offset.parse::<usize>().map_err(|_| bad("bad offset"))?;
        if let Some(prev) = out.last() {
            if prev.path.as_str() >= path {
                return Err(bad("paths are not in lexicographic order"));
            }
        }
        out.push(ParamRecord { path: path.to_string(), dims, offset });
    }
    Ok(out)
}

pub fn decode_archive(manifest: &str, blob: &[u8]) -> Result<ParamTable> {
    let records = parse_manifest(manifest)?;
    let mut expected = 0usize;
    let mut out = BTreeMap::new();
    for rec in records {
        let n: usize = rec.dims.iter().product();
        if rec.offset != expected {
            return Err(Error::Checkpoint(format!("{}: offset {} but {} bytes precede it", rec.path, rec.offset, expected)));
        }
        let end = expected + 4 * n;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("length mismatch: {} needs bytes up to {end}, blob has {}", rec.path, blob.len())));
        }
        let values = blob[expected..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.insert(rec.path, (rec.dims, values));
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::Checkpoint(format!("length mismatch: manifest covers {expected} bytes, blob has {}", blob.len())));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, cfg: &ModelConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode_archive(&store_table(store)?);
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(CONFIG_FILE), format_kv(&cfg.to_kv()))?;
    Ok(())
}

pub fn read_table(dir: &Path) -> Result<ParamTable> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode_archive(&manifest, &blob)
}

pub fn read_config(dir: &Path) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    cfg.apply_kv(&parse_kv(&fs::read_to_string(dir.join(CONFIG_FILE))?)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Overwrite parameters of `store` with the table. Every table path must
/// already exist in the store with the same shape.
pub fn load_into(store: &ParamStore, table: &ParamTable) -> Result<()> {
    for (path, (dims, values)) in table {
        let var = store.get(path).ok_or_else(|| Error::Checkpoint(format!("unknown parameter path {path}")))?;
        if var.dims() != dims.as_slice() {
            return Err(Error::Checkpoint(format!("{path}: checkpoint shape {dims:?}, model shape {:?}", var.dims())));
        }
        let t = Tensor::from_vec(values.clone(), dims.as_slice(), &Device::Cpu)?.to_dtype(store.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Build a model for `cfg` and fill it from the checkpoint in `dir`.
/// Parameters absent from the checkpoint keep their initial values.
pub fn load_model(dir: &Path, cfg: &ModelConfig, mode: TrainMode, dtype: DType, seed: u64) -> Result<(ParamStore, FineMaskModel)> {
    let store = ParamStore::new(dtype, seed);
    let model = FineMaskModel::build(&store, cfg, mode)?;
    load_into(&store, &read_table(dir)?)?;
    Ok((store, model))
}
