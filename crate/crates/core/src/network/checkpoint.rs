//! Named-array files: `<base>.bin` holds the little-endian `f64` payload of
//! every array back to back, `<base>.json` is the manifest describing names,
//! shapes and byte offsets plus free-form metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const CHECKPOINT_VERSION: &str = "miseg-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload file.
    pub offset: u64,
    /// Payload length in bytes.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub version: String,
    pub arrays: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn write_arrays<'a>(
    base: &Path,
    arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    meta: serde_json::Value,
) -> Result<ArrayManifest> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in arrays {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let manifest = ArrayManifest {
        version: CHECKPOINT_VERSION.to_string(),
        arrays: entries,
        meta,
    };
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(with_ext(base, "bin"))?.write_all(&payload)?;
    fs::write(with_ext(base, "json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a pair written by [`write_arrays`].
pub fn read_arrays(base: &Path) -> Result<(ArrayManifest, Vec<(String, Tensor)>)> {
    let manifest: ArrayManifest = serde_json::from_slice(&fs::read(with_ext(base, "json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version `{}`",
            manifest.version
        )));
    }
    let payload = fs::read(with_ext(base, "bin"))?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        if e.bytes as usize != n * 8 || end > payload.len() {
            return Err(Error::Format(format!("array `{}` has an inconsistent extent", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((manifest, arrays))
}
