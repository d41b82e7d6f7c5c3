//! A minimal little-endian binary container for named f64 tensors, plus a
//! JSON manifest describing its contents.
//!
//! # Container layout (all integers little-endian)
//! ```text
//! magic    8 bytes   "DKSTNS01"
//! count    u64       number of tensors
//! per tensor:
//!   name_len u32     length of the UTF-8 name in bytes
//!   name     bytes   UTF-8 name
//!   dtype    u8      1 = f64 (the only defined code)
//!   ndim     u32     number of dimensions
//!   dims     u64 × ndim
//!   data     f64 × Π dims   row-major values
//! ```
//!
//! The manifest is written next to the container at `<path>.manifest.json`
//! and lists, per tensor, the name, shape and absolute byte offset of its
//! data block.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File magic identifying the container format.
pub const MAGIC: &[u8; 8] = b"DKSTNS01";

/// Dtype code of a 64-bit IEEE float.
pub const DTYPE_F64: u8 = 1;

/// A named row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    /// Tensor name (unique within a container).
    pub name: String,
    /// Shape; the data length is the product of the dims.
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

impl NamedTensor {
    /// Constructs a tensor, checking that the data length matches the shape.
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}': shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(NamedTensor {
            name: name.to_string(),
            shape,
            data,
        })
    }
}

/// One manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Tensor name.
    pub name: String,
    /// Tensor shape.
    pub shape: Vec<usize>,
    /// Absolute byte offset of the data block in the container.
    pub offset_bytes: u64,
}

/// The JSON manifest written next to a container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// File name of the container the manifest describes.
    pub container: String,
    /// Data type of all tensors.
    pub dtype: String,
    /// Per-tensor entries in file order.
    pub tensors: Vec<ManifestEntry>,
}

/// The manifest path belonging to a container path.
pub fn manifest_path(container: &Path) -> PathBuf {
    let mut name = container
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    container.with_file_name(name)
}

/// Writes tensors to `path` in the container format and the matching
/// manifest to [`manifest_path`].
pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let name_bytes = t.name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset_bytes: buf.len() as u64,
        });
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    let manifest = Manifest {
        container: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        dtype: "f64".into(),
        tensors: entries,
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads a container back into tensors (bit-exact round trip).
pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::BadContainer("truncated file".into()))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::BadContainer("bad magic".into()));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::BadContainer("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::BadContainer(format!(
                "unsupported dtype code {dtype}"
            )));
        }
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::BadContainer(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - pos
        )));
    }
    Ok(out)
}
