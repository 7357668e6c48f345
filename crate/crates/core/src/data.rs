//! Labelled (or unlabelled) image sets and their on-disk format:
//! `data_manifest.json` plus `images.bin` (little-endian `f32`, `[N, c, h, w]`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PcpError, Result};
use crate::tensor::Tensor;

pub const DATA_MANIFEST_FILE: &str = "data_manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Mixed,
}

/// Where a sample of a derived set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub domain: Domain,
    /// Index in the originating dataset.
    pub index: usize,
    pub pseudo_labeled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain: Domain,
    pub num_classes: usize,
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub origins: Option<Vec<SampleOrigin>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DataManifest {
    format_version: u32,
    name: String,
    domain: Domain,
    shape: Vec<usize>,
    count: usize,
    num_classes: usize,
    labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origins: Option<Vec<SampleOrigin>>,
    checksum_sha256: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        num_classes: usize,
        images: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            domain,
            num_classes,
            images,
            labels,
            origins: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_origins(mut self, origins: Vec<SampleOrigin>) -> Result<Self> {
        if origins.len() != self.len() {
            return Err(PcpError::Shape(format!(
                "{} origins for {} samples",
                origins.len(),
                self.len()
            )));
        }
        self.origins = Some(origins);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.images.dims4()?;
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.batch() {
                return Err(PcpError::Shape(format!(
                    "{} labels for {} images",
                    labels.len(),
                    self.images.batch()
                )));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(PcpError::InvalidArgument(format!(
                    "label {bad} outside [0, {})",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| PcpError::InvalidArgument(format!("dataset {} is unlabeled", self.name)))
    }

    /// Samples at `indices`, in that order, keeping labels and origins.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            domain: self.domain,
            num_classes: self.num_classes,
            images: self.images.select_batch(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            origins: self
                .origins
                .as_ref()
                .map(|o| indices.iter().map(|&i| o[i]).collect()),
        })
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| PcpError::io(dir, e))?;
        let bytes: Vec<u8> = self.images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = DataManifest {
            format_version: DATA_FORMAT_VERSION,
            name: self.name.clone(),
            domain: self.domain,
            shape: self.images.shape().to_vec(),
            count: self.len(),
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            origins: self.origins.clone(),
            checksum_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let images = dir.join(IMAGES_FILE);
        fs::write(&images, &bytes).map_err(|e| PcpError::io(&images, e))?;
        let path = dir.join(DATA_MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| PcpError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| PcpError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join(DATA_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PcpError::io(&path, e))?;
        let m: DataManifest = serde_json::from_str(&text).map_err(|e| PcpError::json(&path, e))?;
        if m.format_version != DATA_FORMAT_VERSION {
            return Err(PcpError::Version {
                found: m.format_version,
                expected: DATA_FORMAT_VERSION,
            });
        }
        let images = dir.join(IMAGES_FILE);
        let bytes = fs::read(&images).map_err(|e| PcpError::io(&images, e))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != m.checksum_sha256 {
            return Err(PcpError::Checksum {
                expected: m.checksum_sha256,
                actual,
            });
        }
        if m.shape.first() != Some(&m.count) {
            return Err(PcpError::Format(format!(
                "count {} disagrees with shape {:?}",
                m.count, m.shape
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if bytes.len() % 4 != 0 {
            return Err(PcpError::Format("image payload is not a whole number of f32".into()));
        }
        let images = Tensor::new(m.shape, data)?;
        let ds = Dataset::new(m.name, m.domain, m.num_classes, images, m.labels)?;
        match m.origins {
            Some(o) => ds.with_origins(o),
            None => Ok(ds),
        }
    }
}
