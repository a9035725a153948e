//! Checkpoint persistence: `meta.json` plus `tensors.bin`.
//!
//! `tensors.bin` is a sequence of entries, each laid out as
//! `u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 values[product(dims)]`,
//! all little-endian, read until end of file.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta<M> {
    pub format_version: u32,
    pub kind: String,
    pub tensor_count: usize,
    #[serde(flatten)]
    pub body: M,
}

pub fn write_tensor_blob<'a, W: Write>(
    mut out: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> io::Result<()> {
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor_blob(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bad = |detail: &str| Error::malformed(origin, detail.to_string());
    let mut cursor = bytes;
    let mut out = Vec::new();
    while !cursor.is_empty() {
        let name_len = read_u32(&mut cursor).map_err(|_| bad("truncated name length"))? as usize;
        if name_len > cursor.len() {
            return Err(bad("truncated name"));
        }
        let (name, rest) = cursor.split_at(name_len);
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        cursor = rest;
        let rank = read_u32(&mut cursor).map_err(|_| bad("truncated rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut cursor).map_err(|_| bad("truncated dims"))? as usize);
        }
        let count: usize = dims.iter().product();
        if count * 4 > cursor.len() {
            return Err(bad("truncated tensor values"));
        }
        let (raw, rest) = cursor.split_at(count * 4);
        cursor = rest;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(dims, values)?));
    }
    Ok(out)
}

/// Writes every parameter whose name starts with `prefix`.
pub fn save_checkpoint<M: Serialize>(
    dir: &Path,
    kind: &str,
    body: &M,
    store: &ParamStore<f32>,
    prefix: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let selected: Vec<_> = store
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .collect();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        tensor_count: selected.len(),
        body,
    };
    let mut blob = Vec::new();
    write_tensor_blob(
        &mut blob,
        selected.iter().map(|p| (p.name.as_str(), &p.value)),
    )?;
    fs::write(dir.join(TENSOR_FILE), blob)?;
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint<M: DeserializeOwned>(
    dir: &Path,
    kind: &str,
) -> Result<(M, ParamStore<f32>)> {
    let meta_path = dir.join(META_FILE);
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::malformed(p, format!("cannot read checkpoint file: {e}")))
    };
    let meta: CheckpointMeta<M> = serde_json::from_slice(&read(&meta_path)?)
        .map_err(|e| Error::malformed(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.kind != kind {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds a {:?}, expected {kind:?}",
            meta.kind
        )));
    }
    let tensor_path = dir.join(TENSOR_FILE);
    let tensors = read_tensor_blob(&read(&tensor_path)?, &tensor_path)?;
    if tensors.len() != meta.tensor_count {
        return Err(Error::malformed(
            tensor_path,
            format!(
                "{} tensors, metadata says {}",
                tensors.len(),
                meta.tensor_count
            ),
        ));
    }
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.add(name, t);
    }
    Ok((meta.body, store))
}

/// SHA-256 over metadata and tensor bytes, hex encoded.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(META_FILE))?);
    h.update(fs::read(dir.join(TENSOR_FILE))?);
    Ok(hex_digest(&h.finalize()))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
