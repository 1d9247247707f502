//! Split files: 8-byte magic, little-endian `u64` header length, JSON header,
//! then per sample the `f64` image followed by the `u8` label map.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SegSample, SplitSpec, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const DATASET_VERSION: &str = "miseg-data-1";
const MAGIC: &[u8; 8] = b"MISEGDS1";
const SPLIT_NAMES: [&str; 3] = ["labeled", "unlabeled", "validation"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFileHeader {
    pub version: String,
    pub split: String,
    pub spec: SyntheticSpec,
    pub split_spec: SplitSpec,
    pub seed: u64,
    pub count: usize,
    pub extent: usize,
    /// Labels are stored but withheld from training.
    pub labels_hidden: bool,
    /// `(volume, slice)` per sample.
    pub entries: Vec<(usize, usize)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Writes one split. `hidden` supplies the labels of unlabeled samples.
pub fn write_split_file(
    path: &Path,
    header: &SplitFileHeader,
    samples: &[SegSample],
    hidden: Option<&[Vec<u8>]>,
) -> Result<()> {
    if samples.len() != header.count || hidden.is_some_and(|h| h.len() != samples.len()) {
        return Err(format_err("sample count does not match header"));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let n = header.extent * header.extent;
    for (i, s) in samples.iter().enumerate() {
        if s.image.numel() != n {
            return Err(format_err(format!("sample {i} has the wrong extent")));
        }
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        let label = match (&s.label, hidden) {
            (Some(l), _) => l,
            (None, Some(h)) => &h[i],
            (None, None) => return Err(format_err(format!("sample {i} has no label to store"))),
        };
        out.write_all(label)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads one split written by [`write_split_file`]. Hidden labels come back
/// separately and the samples carry `label: None`.
pub fn read_split_file(path: &Path) -> Result<(SplitFileHeader, Vec<SegSample>, Vec<Vec<u8>>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(format!("{} is not a dataset file", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| format_err("truncated header"))?;
    let header: SplitFileHeader = serde_json::from_slice(body)?;
    if header.version != DATASET_VERSION {
        return Err(format_err(format!("unsupported dataset version `{}`", header.version)));
    }
    let n = header.extent * header.extent;
    let stride = n * 9;
    let payload = &bytes[16 + hlen..];
    if payload.len() != stride * header.count || header.entries.len() != header.count {
        return Err(format_err("payload size does not match header"));
    }
    let mut samples = Vec::with_capacity(header.count);
    let mut hidden = Vec::new();
    for (chunk, &(volume, slice)) in payload.chunks_exact(stride).zip(&header.entries) {
        let image: Vec<f64> = chunk[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let label = chunk[n * 8..].to_vec();
        let label = if header.labels_hidden {
            hidden.push(label);
            None
        } else {
            Some(label)
        };
        samples.push(SegSample {
            image: Tensor::new(&[1, header.extent, header.extent], image)?,
            label,
            volume,
            slice,
        });
    }
    Ok((header, samples, hidden))
}

impl Splits {
    /// Writes `labeled.msd`, `unlabeled.msd` and `validation.msd` into `dir`.
    pub fn save(&self, dir: &Path, spec: &SyntheticSpec, split_spec: &SplitSpec, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let parts: [(&[SegSample], Option<&[Vec<u8>]>); 3] = [
            (&self.labeled, None),
            (&self.unlabeled, Some(&self.unlabeled_truth)),
            (&self.validation, None),
        ];
        for (name, (samples, hidden)) in SPLIT_NAMES.iter().zip(parts) {
            let header = SplitFileHeader {
                version: DATASET_VERSION.to_string(),
                split: name.to_string(),
                spec: spec.clone(),
                split_spec: split_spec.clone(),
                seed,
                count: samples.len(),
                extent: spec.extent,
                labels_hidden: hidden.is_some(),
                entries: samples.iter().map(|s| (s.volume, s.slice)).collect(),
            };
            write_split_file(&dir.join(format!("{name}.msd")), &header, samples, hidden)?;
        }
        Ok(())
    }

    /// Loads the three split files from `dir`, returning the labeled split's header.
    pub fn load(dir: &Path) -> Result<(SplitFileHeader, Splits)> {
        let (header, labeled, _) = read_split_file(&dir.join("labeled.msd"))?;
        let (uh, unlabeled, unlabeled_truth) = read_split_file(&dir.join("unlabeled.msd"))?;
        let (vh, validation, _) = read_split_file(&dir.join("validation.msd"))?;
        for other in [&uh, &vh] {
            if other.spec != header.spec || other.seed != header.seed {
                return Err(format_err("split files come from different datasets"));
            }
        }
        Ok((
            header,
            Splits {
                labeled,
                unlabeled,
                unlabeled_truth,
                validation,
            },
        ))
    }
}
