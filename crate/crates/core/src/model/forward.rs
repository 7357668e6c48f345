use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{PcpError, Result};
use crate::numerics::{conv2d_forward, gemm_bt};
use crate::tensor::Tensor;

use super::{ChannelSelection, LayerOp, Linear, ModelGraph};

/// Features captured at one layer: the tensor arriving at the layer (before
/// any channel mask) and the layer's output (pre-activation for convs).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, K]`
    pub logits: Tensor,
    pub recorded: BTreeMap<usize, LayerRecord>,
}

/// Evaluation batches are chunked to bound peak memory.
const EVAL_CHUNK: usize = 256;

impl ModelGraph {
    pub fn forward(&self, batch: &Tensor, record_at: &[usize]) -> Result<ForwardOutput> {
        let (_, c, h, w) = batch.dims4()?;
        if [c, h, w] != self.input_shape() {
            return Err(PcpError::Shape(format!(
                "model {} expects inputs {:?}, got {:?}",
                self.name,
                self.input_shape(),
                batch.shape()
            )));
        }
        let mut recorded = BTreeMap::new();
        let mut x = batch.clone();
        let mut shortcut: Option<Tensor> = None;
        for (i, spec) in self.layers().iter().enumerate() {
            let layer_err = |e: PcpError| PcpError::Layer {
                layer: i,
                reason: e.to_string(),
            };
            let out = match &spec.op {
                LayerOp::Conv(conv) => {
                    let input = self.conv_input(i, &x).map_err(layer_err)?;
                    conv2d_forward(&input, &conv.weight, &conv.bias, conv.stride, conv.pad)
                        .map_err(layer_err)?
                }
                LayerOp::Fc(fc) => linear_forward(&x, fc).map_err(layer_err)?,
                LayerOp::MaxPool { size, stride } => maxpool_forward(&x, *size, *stride).0,
                LayerOp::Relu => relu(&x),
                LayerOp::ResidualEntry => {
                    shortcut = Some(x.clone());
                    x.clone()
                }
                LayerOp::ResidualExit => {
                    let s = shortcut.take().ok_or_else(|| PcpError::Layer {
                        layer: i,
                        reason: "no open residual block".into(),
                    })?;
                    add(&x, &s).map_err(layer_err)?
                }
            };
            if record_at.contains(&i) {
                recorded.insert(
                    i,
                    LayerRecord {
                        input: x,
                        output: out.clone(),
                    },
                );
            }
            x = out;
        }
        let n = x.batch();
        let k = x.item_len();
        let logits = x.reshape(vec![n, k])?;
        Ok(ForwardOutput { logits, recorded })
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.batch();
        if n <= EVAL_CHUNK {
            return Ok(self.forward(batch, &[])?.logits);
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = batch.batch_range(start, (start + EVAL_CHUNK).min(n))?;
            parts.push(self.forward(&chunk, &[])?.logits);
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Top-1 class per sample (lowest index wins ties).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.data().chunks(logits.item_len()).map(argmax).collect())
    }

    /// Top-1 accuracy against `labels`.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        if images.batch() != labels.len() {
            return Err(PcpError::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(PcpError::InvalidArgument("accuracy of an empty set".into()));
        }
        let correct = self
            .predict(images)?
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// The tensor a convolution actually consumes: masked channels zeroed, or
    /// gathered away in a compacted model.
    pub(crate) fn conv_input<'a>(&self, layer: usize, x: &'a Tensor) -> Result<Cow<'a, Tensor>> {
        if let Some(mask) = self.gather_mask(layer) {
            return gather_channels(x, &mask.kept()).map(Cow::Owned);
        }
        match self.input_mask(layer) {
            Some(mask) if !mask.is_full() => mask_channels(x, mask).map(Cow::Owned),
            _ => Ok(Cow::Borrowed(x)),
        }
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Zeroes the channels a selection drops.
pub(crate) fn mask_channels(x: &Tensor, mask: &ChannelSelection) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if mask.len() != c {
        return Err(PcpError::Shape(format!(
            "mask of {} channels applied to a {c}-channel feature",
            mask.len()
        )));
    }
    let mut out = x.clone();
    let plane = h * w;
    for b in 0..n {
        for ch in (0..c).filter(|&ch| !mask.is_kept(ch)) {
            let start = (b * c + ch) * plane;
            out.data_mut()[start..start + plane].fill(0.0);
        }
    }
    Ok(out)
}

pub(crate) fn gather_channels(x: &Tensor, kept: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * kept.len() * plane);
    for b in 0..n {
        for &ch in kept {
            if ch >= c {
                return Err(PcpError::Shape(format!("channel {ch} of a {c}-channel feature")));
            }
            let start = (b * c + ch) * plane;
            data.extend_from_slice(&x.data()[start..start + plane]);
        }
    }
    Tensor::new(vec![n, kept.len(), h, w], data)
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(PcpError::Shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Max pooling; also returns the flat input index of each output's maximum
/// (first occurrence on ties).
pub(crate) fn maxpool_forward(x: &Tensor, size: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4().expect("pooling a rank-4 feature");
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    (
        Tensor::new(vec![n, c, oh, ow], out).expect("pool output shape"),
        arg,
    )
}

/// `y = x W^T + b` on the flattened input.
pub(crate) fn linear_forward(x: &Tensor, fc: &Linear) -> Result<Tensor> {
    let n = x.batch();
    let input = x.item_len();
    if input != fc.in_features() {
        return Err(PcpError::Shape(format!(
            "fc expects {} inputs, got {input}",
            fc.in_features()
        )));
    }
    let out = fc.out_features();
    let mut y = gemm_bt(x.data(), fc.weight.data(), n, input, out);
    for row in y.chunks_mut(out) {
        row.iter_mut().zip(&fc.bias).for_each(|(v, b)| *v += b);
    }
    Tensor::new(vec![n, out], y)
}
