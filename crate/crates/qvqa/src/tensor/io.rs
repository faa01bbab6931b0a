//! Binary tensor files and checkpoint directories.
//!
//! Tensor file layout: magic `QVT1`, u32 LE rank, rank × u32 LE dims,
//! row-major 32-bit LE floats. A checkpoint is a directory with one tensor
//! file per parameter plus `manifest.json` mapping name → file → shape.
//! The on-disk float width is always 32-bit regardless of build precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Params, Tensor, S};
use crate::error::{Error, Result};

pub const QVT_MAGIC: &[u8; 4] = b"QVT1";

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    buf.extend_from_slice(QVT_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| fail(&e.to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != QVT_MAGIC {
        return Err(fail("missing QVT1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dim header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(fail("data length does not match shape"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as S)
        .collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(dir: &Path, params: &Params) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for id in params.ids() {
        let name = params.name(id).to_string();
        let file = format!("{name}.qvt");
        save_tensor(&dir.join(&file), params.value(id))?;
        manifest.insert(
            name,
            ManifestEntry { file, shape: params.value(id).shape().to_vec() },
        );
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads tensors from `dir` into an existing registry. Every registered
/// parameter must be present with a matching shape; extras are an error too.
pub fn load_checkpoint(dir: &Path, params: &mut Params) -> Result<()> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_str(&text)?;
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        let entry = manifest
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest missing tensor {name:?}")))?;
        let t = load_tensor(&dir.join(&entry.file))?;
        if t.shape() != params.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = t;
    }
    let known: Vec<&String> = manifest.keys().collect();
    for name in known {
        if params.id_of(name).is_none() {
            return Err(Error::Checkpoint(format!("unknown tensor {name:?} in manifest")));
        }
    }
    Ok(())
}
