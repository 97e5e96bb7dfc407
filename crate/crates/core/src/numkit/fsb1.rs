//! FSB1 binary array format.
//!
//! Layout: magic `FSB1`, rank as u32 LE, `rank` dimensions as u32 LE, then
//! the row-major payload as f32 LE.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSB1";

pub fn encode(a: &Array) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * a.rank() + 4 * a.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(a.rank() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in a.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if r.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            r.len(),
            n * 4
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated header".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write(path: &Path, a: &Array) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(a)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    data: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn bundle_data_path(json: &Path) -> PathBuf {
    json.with_extension("fsb")
}

/// Writes named tensors as one flat FSB1 payload next to a JSON manifest
/// holding names, shapes, offsets and free-form metadata.
pub fn write_bundle(
    json: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Array)],
) -> Result<()> {
    let data_path = bundle_data_path(json);
    let mut flat = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, a) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset: flat.len(),
        });
        flat.extend_from_slice(a.data());
    }
    if flat.is_empty() {
        return Err(Error::Format("bundle holds no values".into()));
    }
    let n = flat.len();
    write(&data_path, &Array::new(vec![n], flat)?)?;
    let manifest = Manifest {
        data: data_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
        meta,
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(json, e))?;
    std::fs::write(json, text).map_err(|e| Error::io(json, e))
}

pub type Tensors = BTreeMap<String, Array>;

pub fn read_bundle(json: &Path) -> Result<(serde_json::Value, Tensors)> {
    let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(json, e))?;
    let flat = read(&json.with_file_name(&m.data))?;
    let data = flat.data();
    let mut out = BTreeMap::new();
    for e in m.tensors {
        let n: usize = e.shape.iter().product();
        let slice = data.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Format(format!(
                "{}: tensor {} runs past the payload",
                json.display(),
                e.name
            ))
        })?;
        out.insert(e.name, Array::new(e.shape, slice.to_vec())?);
    }
    Ok((m.meta, out))
}

/// Removes and returns a tensor, checking its shape.
pub fn take(t: &mut Tensors, name: &str, shape: &[usize]) -> Result<Array> {
    let a = t
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    if a.shape() != shape {
        return Err(Error::Format(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            a.shape()
        )));
    }
    Ok(a)
}
