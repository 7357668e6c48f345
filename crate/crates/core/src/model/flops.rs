//! Multiply-accumulate counting.
//!
//! A convolution costs `in_eff * kh * kw * out_eff * H_out * W_out`, where
//! `in_eff` is the number of input channels its mask keeps and `out_eff` the
//! number of its filters still consumed downstream. A fully connected layer
//! costs `in * out`. Pooling, activations and residual additions are free.

use serde::Serialize;

use crate::error::{PcpError, Result};

use super::{LayerOp, ModelGraph, ResidualRole};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub macs: u64,
}

impl ModelGraph {
    /// Filters of `layer` still read by its consumer.
    pub fn effective_out_channels(&self, layer: usize) -> Option<usize> {
        let conv = self.layers().get(layer)?.conv()?;
        let consumer = self.consumer(layer);
        let consumed = consumer
            .filter(|&c| self.residual_role(c) != Some(ResidualRole::First))
            .and_then(|c| self.selections().get(&c))
            .filter(|sel| sel.len() == conv.out_channels())
            .map(|sel| sel.nnz());
        Some(consumed.unwrap_or(conv.out_channels()))
    }

    /// Input channels of `layer` that survive its mask.
    pub fn effective_in_channels(&self, layer: usize) -> Option<usize> {
        let conv = self.layers().get(layer)?.conv()?;
        Some(match self.input_mask(layer) {
            Some(mask) => mask.nnz(),
            None => conv.in_channels(),
        })
    }

    pub fn flops_breakdown(&self) -> Result<Vec<LayerFlops>> {
        let shapes = self.layer_input_shapes()?;
        let mut rows = Vec::new();
        for (i, spec) in self.layers().iter().enumerate() {
            match &spec.op {
                LayerOp::Conv(conv) => {
                    let out = shapes[i + 1];
                    let (kh, kw) = conv.kernel();
                    let cin = self.effective_in_channels(i).expect("conv");
                    let cout = self.effective_out_channels(i).expect("conv");
                    let macs = (cin * kh * kw * cout * out[1] * out[2]) as u64;
                    rows.push(LayerFlops {
                        layer: i,
                        kind: "conv",
                        in_channels: cin,
                        out_channels: cout,
                        macs,
                    });
                }
                LayerOp::Fc(fc) => rows.push(LayerFlops {
                    layer: i,
                    kind: "fc",
                    in_channels: fc.in_features(),
                    out_channels: fc.out_features(),
                    macs: (fc.in_features() * fc.out_features()) as u64,
                }),
                _ => {}
            }
        }
        Ok(rows)
    }

    /// Total multiply-accumulates of one forward pass of a single image.
    pub fn flops(&self) -> Result<u64> {
        Ok(self.flops_breakdown()?.iter().map(|r| r.macs).sum())
    }
}

/// `flops(original) / flops(current)`.
pub fn compression_ratio(original: &ModelGraph, current: &ModelGraph) -> Result<f64> {
    if original.layers().len() != current.layers().len()
        || original
            .layers()
            .iter()
            .zip(current.layers())
            .any(|(a, b)| a.op.kind() != b.op.kind())
    {
        return Err(PcpError::InvalidArgument(format!(
            "models {} and {} do not share an architecture",
            original.name, current.name
        )));
    }
    let current_flops = current.flops()?;
    if current_flops == 0 {
        return Err(PcpError::InvalidArgument(
            "compression ratio against a zero-FLOP model".into(),
        ));
    }
    Ok(original.flops()? as f64 / current_flops as f64)
}
