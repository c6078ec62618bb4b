//! Binary parameter container.
//!
//! ```text
//! magic    4 bytes  "DCKP"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON: {"meta": ..., "tensors": [...]}
//! payload  f64 LE values of every tensor, in header order
//! ```
//!
//! Each tensor record holds its store name, parameter name, shape and element
//! offset into the payload. Values are stored bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use decouple_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"DCKP";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    store: String,
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

pub fn write_container(path: &Path, meta: &serde_json::Value, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (store, params) in stores {
        for (name, t) in params.iter() {
            tensors.push(TensorRecord {
                store: store.to_string(),
                name: name.to_string(),
                shape: t.shape(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })
    .expect("serialisable");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns the metadata and one store per store name, in file order.
pub fn read_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ParamStore>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(bad("not a parameter container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut stores: BTreeMap<String, ParamStore> = BTreeMap::new();
    for rec in header.tensors {
        let len: usize = rec.shape.iter().product();
        let start = rec.offset * 8;
        let chunk = payload
            .get(start..start + len * 8)
            .ok_or_else(|| bad(&format!("tensor {} runs past the payload", rec.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stores
            .entry(rec.store)
            .or_default()
            .add(rec.name, Tensor::from_vec(rec.shape, data));
    }
    Ok((header.meta, stores))
}
