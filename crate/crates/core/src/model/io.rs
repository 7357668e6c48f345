//! On-disk model format: a directory holding `manifest.json` and `weights.bin`.
//!
//! `weights.bin` concatenates, in layer order, each parameterised layer's
//! weight tensor followed by its bias, as little-endian `f32` in row-major
//! order. The manifest records every tensor's shape and element offset, all
//! selections and sampler masks, and the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PcpError, Result};
use crate::tensor::Tensor;

use super::{ChannelSelection, Conv2d, LayerOp, LayerSpec, Linear, ModelGraph};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerEntry {
    Conv {
        prunable: bool,
        stride: usize,
        pad: usize,
        weight: TensorEntry,
        bias: TensorEntry,
    },
    Fc {
        weight: TensorEntry,
        bias: TensorEntry,
    },
    Maxpool {
        size: usize,
        stride: usize,
    },
    Relu,
    ResidualEntry,
    ResidualExit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub name: String,
    pub iteration: usize,
    pub compact: bool,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerEntry>,
    /// Layer index -> 0/1 per input channel.
    pub selections: BTreeMap<usize, Vec<u8>>,
    /// Residual-entry layer index -> 0/1 per block input channel.
    pub samplers: BTreeMap<usize, Vec<u8>>,
    pub payload_len: usize,
    pub checksum_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ModelGraph {
    /// Encodes into a manifest and the little-endian weight payload.
    pub fn serialize(&self) -> (ModelManifest, Vec<u8>) {
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |t: &[f32], shape: Vec<usize>| {
            let entry = TensorEntry {
                shape,
                offset: payload.len(),
                len: t.len(),
            };
            payload.extend_from_slice(t);
            entry
        };
        let layers = self
            .layers()
            .iter()
            .map(|spec| match &spec.op {
                LayerOp::Conv(c) => LayerEntry::Conv {
                    prunable: spec.prunable,
                    stride: c.stride,
                    pad: c.pad,
                    weight: push(c.weight.data(), c.weight.shape().to_vec()),
                    bias: push(&c.bias, vec![c.bias.len()]),
                },
                LayerOp::Fc(f) => LayerEntry::Fc {
                    weight: push(f.weight.data(), f.weight.shape().to_vec()),
                    bias: push(&f.bias, vec![f.bias.len()]),
                },
                LayerOp::MaxPool { size, stride } => LayerEntry::Maxpool {
                    size: *size,
                    stride: *stride,
                },
                LayerOp::Relu => LayerEntry::Relu,
                LayerOp::ResidualEntry => LayerEntry::ResidualEntry,
                LayerOp::ResidualExit => LayerEntry::ResidualExit,
            })
            .collect();
        let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            iteration: self.iteration,
            compact: self.is_compact(),
            input_shape: self.input_shape(),
            layers,
            selections: self.selections().iter().map(|(&l, s)| (l, s.to_bits())).collect(),
            samplers: self.samplers().iter().map(|(&l, s)| (l, s.to_bits())).collect(),
            payload_len: bytes.len(),
            checksum_sha256: sha256_hex(&bytes),
        };
        (manifest, bytes)
    }

    /// Rebuilds a model, verifying version, checksum and every declared shape.
    pub fn deserialize(manifest: &ModelManifest, bytes: &[u8]) -> Result<ModelGraph> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(PcpError::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let actual = sha256_hex(bytes);
        if actual != manifest.checksum_sha256 {
            return Err(PcpError::Checksum {
                expected: manifest.checksum_sha256.clone(),
                actual,
            });
        }
        if bytes.len() != manifest.payload_len || bytes.len() % 4 != 0 {
            return Err(PcpError::Format(format!(
                "payload is {} bytes, manifest declares {}",
                bytes.len(),
                manifest.payload_len
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let take = |e: &TensorEntry| -> Result<Tensor> {
            let declared: usize = e.shape.iter().product();
            if declared != e.len {
                return Err(PcpError::Format(format!(
                    "tensor shape {:?} declares {declared} elements but its entry holds {}",
                    e.shape, e.len
                )));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= floats.len()).ok_or_else(|| {
                PcpError::Format(format!(
                    "tensor at offset {} of length {} overruns a payload of {} values",
                    e.offset,
                    e.len,
                    floats.len()
                ))
            })?;
            Tensor::new(e.shape.clone(), floats[e.offset..end].to_vec())
        };
        let layers = manifest
            .layers
            .iter()
            .map(|entry| {
                Ok(match entry {
                    LayerEntry::Conv {
                        prunable,
                        stride,
                        pad,
                        weight,
                        bias,
                    } => LayerSpec {
                        op: LayerOp::Conv(Conv2d {
                            weight: take(weight)?,
                            bias: take(bias)?.into_data(),
                            stride: *stride,
                            pad: *pad,
                        }),
                        prunable: *prunable,
                    },
                    LayerEntry::Fc { weight, bias } => LayerSpec::new(LayerOp::Fc(Linear {
                        weight: take(weight)?,
                        bias: take(bias)?.into_data(),
                    })),
                    LayerEntry::Maxpool { size, stride } => LayerSpec::new(LayerOp::MaxPool {
                        size: *size,
                        stride: *stride,
                    }),
                    LayerEntry::Relu => LayerSpec::new(LayerOp::Relu),
                    LayerEntry::ResidualEntry => LayerSpec::new(LayerOp::ResidualEntry),
                    LayerEntry::ResidualExit => LayerSpec::new(LayerOp::ResidualExit),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decode = |m: &BTreeMap<usize, Vec<u8>>| -> Result<BTreeMap<usize, ChannelSelection>> {
            m.iter()
                .map(|(&l, bits)| Ok((l, ChannelSelection::from_bits(bits)?)))
                .collect()
        };
        let model = ModelGraph::from_parts(
            manifest.name.clone(),
            manifest.iteration,
            manifest.input_shape,
            layers,
            decode(&manifest.selections)?,
            decode(&manifest.samplers)?,
            manifest.compact,
        )?;
        // Every prunable layer must own exactly one mask.
        for l in model.prunable_layers() {
            if model.input_mask(l).is_none() {
                return Err(PcpError::Format(format!(
                    "prunable layer {l} has no selection or sampler mask"
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| PcpError::io(dir, e))?;
        let (manifest, bytes) = self.serialize();
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, &bytes).map_err(|e| PcpError::io(&weights, e))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| PcpError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| PcpError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ModelGraph> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PcpError::io(&path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| PcpError::json(&path, e))?;
        let weights = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights).map_err(|e| PcpError::io(&weights, e))?;
        ModelGraph::deserialize(&manifest, &bytes)
    }
}
