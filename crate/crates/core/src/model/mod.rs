//! The network being pruned: an ordered layer list with per-layer channel
//! selections and residual-block sampler masks.
//!
//! Selections are masks over the original input channels of a prunable
//! convolution. Pruned channels stay in place with zeroed weights until
//! [`ModelGraph::export_compact`] physically removes them.

mod flops;
pub(crate) mod forward;
mod io;

pub use flops::{compression_ratio, LayerFlops};
pub use forward::{ForwardOutput, LayerRecord};
pub use io::{ModelManifest, FORMAT_VERSION};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PcpError, Result};
use crate::numerics::conv_output_size;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, kh, kw]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv(Conv2d),
    /// Flattens its input.
    Fc(Linear),
    MaxPool { size: usize, stride: usize },
    Relu,
    /// Saves the current feature as the block shortcut.
    ResidualEntry,
    /// Adds the saved shortcut to the branch output.
    ResidualExit,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "conv",
            LayerOp::Fc(_) => "fc",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::Relu => "relu",
            LayerOp::ResidualEntry => "residual_entry",
            LayerOp::ResidualExit => "residual_exit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn new(op: LayerOp) -> Self {
        LayerSpec { op, prunable: false }
    }

    pub fn prunable(op: LayerOp) -> Self {
        LayerSpec { op, prunable: true }
    }

    pub fn conv(&self) -> Option<&Conv2d> {
        match &self.op {
            LayerOp::Conv(c) => Some(c),
            _ => None,
        }
    }
}

/// 0/1 indicator per input channel of one prunable layer. Always keeps at
/// least one channel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelSelection {
    beta: Vec<bool>,
}

/// Channel mask at a residual block's first convolution. It gates only the
/// branch input; the shortcut always carries every channel.
pub type SamplerMask = ChannelSelection;

impl ChannelSelection {
    pub fn all(len: usize) -> Self {
        ChannelSelection {
            beta: vec![true; len],
        }
    }

    pub fn from_mask(beta: Vec<bool>) -> Result<Self> {
        if !beta.iter().any(|&b| b) {
            return Err(PcpError::Precondition(
                "a channel selection must keep at least one channel".into(),
            ));
        }
        Ok(ChannelSelection { beta })
    }

    pub fn from_kept(len: usize, kept: &[usize]) -> Result<Self> {
        let mut beta = vec![false; len];
        for &k in kept {
            if k >= len {
                return Err(PcpError::InvalidArgument(format!(
                    "channel {k} out of range for {len} channels"
                )));
            }
            beta[k] = true;
        }
        ChannelSelection::from_mask(beta)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.beta.iter().filter(|&&b| b).count()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.beta[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.beta
    }

    pub fn is_full(&self) -> bool {
        self.beta.iter().all(|&b| b)
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&i| self.beta[i]).collect()
    }

    /// Whether every channel kept here is also kept by `other`.
    pub fn is_subset_of(&self, other: &ChannelSelection) -> bool {
        self.beta.len() == other.beta.len()
            && self.beta.iter().zip(&other.beta).all(|(&a, &b)| !a || b)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.beta.iter().map(|&b| b as u8).collect()
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let beta = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(PcpError::Format(format!(
                    "selection entries must be 0 or 1, found {other}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelSelection::from_mask(beta)
    }
}

/// Position of a convolution inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualRole {
    First,
    Middle,
    Third,
}

/// Feature shape `[channels, height, width]`.
pub type FeatureShape = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// Iteration tag `t` of the pruning run that produced this model.
    pub iteration: usize,
    input_shape: FeatureShape,
    layers: Vec<LayerSpec>,
    selections: BTreeMap<usize, ChannelSelection>,
    /// Keyed by the index of the block's `ResidualEntry` layer.
    samplers: BTreeMap<usize, SamplerMask>,
    compact: bool,
}

impl ModelGraph {
    /// Builds a model with all-ones selections on every prunable layer.
    pub fn new(name: impl Into<String>, input_shape: FeatureShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut model = ModelGraph {
            name: name.into(),
            iteration: 0,
            input_shape,
            layers,
            selections: BTreeMap::new(),
            samplers: BTreeMap::new(),
            compact: false,
        };
        model.check_structure()?;
        for l in model.prunable_layers() {
            let c = model.layers[l].conv().expect("checked").in_channels();
            match model.residual_role(l) {
                Some(ResidualRole::First) => {
                    model.samplers.insert(l - 1, ChannelSelection::all(c));
                }
                _ => {
                    model.selections.insert(l, ChannelSelection::all(c));
                }
            }
        }
        model.layer_input_shapes()?;
        Ok(model)
    }

    pub(crate) fn from_parts(
        name: String,
        iteration: usize,
        input_shape: FeatureShape,
        layers: Vec<LayerSpec>,
        selections: BTreeMap<usize, ChannelSelection>,
        samplers: BTreeMap<usize, SamplerMask>,
        compact: bool,
    ) -> Result<Self> {
        let model = ModelGraph {
            name,
            iteration,
            input_shape,
            layers,
            selections,
            samplers,
            compact,
        };
        model.check_structure()?;
        model.check_selections()?;
        model.layer_input_shapes()?;
        Ok(model)
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.get(index)
    }

    pub fn selections(&self) -> &BTreeMap<usize, ChannelSelection> {
        &self.selections
    }

    pub fn samplers(&self) -> &BTreeMap<usize, SamplerMask> {
        &self.samplers
    }

    /// True once pruned channels have been physically removed.
    pub fn is_compact(&self) -> bool {
        self.compact
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.op, LayerOp::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv(&self, layer: usize) -> Result<&Conv2d> {
        self.layers
            .get(layer)
            .and_then(LayerSpec::conv)
            .ok_or_else(|| PcpError::Layer {
                layer,
                reason: "not a convolution".into(),
            })
    }

    /// Channel mask applied to the input of `layer`: its selection, or the
    /// block sampler for a residual first convolution.
    pub fn input_mask(&self, layer: usize) -> Option<&ChannelSelection> {
        match self.residual_role(layer) {
            Some(ResidualRole::First) => self.samplers.get(&(layer - 1)),
            _ => self.selections.get(&layer),
        }
    }

    /// In a compact model, the mask whose kept channels a convolution gathers
    /// from its (wider) incoming tensor.
    pub(crate) fn gather_mask(&self, layer: usize) -> Option<&ChannelSelection> {
        if !self.compact {
            return None;
        }
        let conv = self.layers.get(layer)?.conv()?;
        self.input_mask(layer).filter(|m| m.len() != conv.in_channels())
    }

    /// Number of output classes (width of the final layer).
    pub fn num_classes(&self) -> usize {
        self.output_shape().map(|s| s[0] * s[1] * s[2]).unwrap_or(0)
    }

    /// `(entry, exit)` indices of the residual block containing `layer`.
    pub fn block_of(&self, layer: usize) -> Option<(usize, usize)> {
        let entry = (0..=layer.min(self.layers.len().saturating_sub(1)))
            .rev()
            .find(|&i| matches!(self.layers[i].op, LayerOp::ResidualEntry | LayerOp::ResidualExit))?;
        if !matches!(self.layers[entry].op, LayerOp::ResidualEntry) || entry == layer {
            return None;
        }
        let exit = (layer..self.layers.len())
            .find(|&i| matches!(self.layers[i].op, LayerOp::ResidualExit))?;
        Some((entry, exit))
    }

    pub fn residual_role(&self, layer: usize) -> Option<ResidualRole> {
        self.layers.get(layer)?.conv()?;
        let (entry, exit) = self.block_of(layer)?;
        let convs: Vec<usize> = (entry + 1..exit)
            .filter(|&i| self.layers[i].conv().is_some())
            .collect();
        if convs.first() == Some(&layer) {
            Some(ResidualRole::First)
        } else if convs.last() == Some(&layer) {
            Some(ResidualRole::Third)
        } else {
            Some(ResidualRole::Middle)
        }
    }

    /// The convolution whose output filters feed `layer` through channel-wise
    /// layers only (ReLU, pooling). `None` if a residual marker, a fully
    /// connected layer or the network input intervenes.
    pub fn producer(&self, layer: usize) -> Option<usize> {
        for i in (0..layer).rev() {
            match self.layers[i].op {
                LayerOp::Conv(_) => return Some(i),
                LayerOp::Relu | LayerOp::MaxPool { .. } => continue,
                _ => return None,
            }
        }
        None
    }

    /// Inverse of [`ModelGraph::producer`].
    pub fn consumer(&self, layer: usize) -> Option<usize> {
        for i in layer + 1..self.layers.len() {
            match self.layers[i].op {
                LayerOp::Conv(_) => return Some(i),
                LayerOp::Relu | LayerOp::MaxPool { .. } => continue,
                _ => return None,
            }
        }
        None
    }

    /// Whether removing input channels of `layer` also removes the matching
    /// output filters of its producer.
    pub fn removes_producer_filters(&self, layer: usize) -> bool {
        self.producer(layer).is_some() && self.residual_role(layer) != Some(ResidualRole::First)
    }

    fn check_structure(&self) -> Result<()> {
        let mut open: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            match &l.op {
                LayerOp::ResidualEntry => {
                    if open.is_some() {
                        return Err(PcpError::Layer {
                            layer: i,
                            reason: "nested residual blocks are not supported".into(),
                        });
                    }
                    open = Some(i);
                }
                LayerOp::ResidualExit => {
                    let entry = open.take().ok_or_else(|| PcpError::Layer {
                        layer: i,
                        reason: "residual exit without a matching entry".into(),
                    })?;
                    if !(entry + 1..i).any(|j| self.layers[j].conv().is_some()) {
                        return Err(PcpError::Layer {
                            layer: i,
                            reason: "residual block without a convolution".into(),
                        });
                    }
                }
                LayerOp::Conv(c) => {
                    if c.weight.ndim() != 4 || c.bias.len() != c.out_channels() {
                        return Err(PcpError::Layer {
                            layer: i,
                            reason: format!(
                                "conv weight {:?} with {} biases",
                                c.weight.shape(),
                                c.bias.len()
                            ),
                        });
                    }
                }
                LayerOp::Fc(f) => {
                    if f.weight.ndim() != 2 || f.bias.len() != f.out_features() {
                        return Err(PcpError::Layer {
                            layer: i,
                            reason: format!(
                                "fc weight {:?} with {} biases",
                                f.weight.shape(),
                                f.bias.len()
                            ),
                        });
                    }
                }
                LayerOp::MaxPool { size, stride } => {
                    if *size == 0 || *stride == 0 {
                        return Err(PcpError::Layer {
                            layer: i,
                            reason: "pool size and stride must be positive".into(),
                        });
                    }
                }
                LayerOp::Relu => {}
            }
            if l.prunable && l.conv().is_none() {
                return Err(PcpError::Layer {
                    layer: i,
                    reason: format!("only convolutions can be prunable, found {}", l.op.kind()),
                });
            }
        }
        if let Some(entry) = open {
            return Err(PcpError::Layer {
                layer: entry,
                reason: "residual entry is never closed".into(),
            });
        }
        Ok(())
    }

    fn check_selections(&self) -> Result<()> {
        for (&l, sel) in &self.selections {
            let spec = self.layers.get(l).ok_or_else(|| PcpError::Layer {
                layer: l,
                reason: "selection refers to a missing layer".into(),
            })?;
            let conv = spec.conv().ok_or_else(|| PcpError::Layer {
                layer: l,
                reason: "selection on a non-convolution".into(),
            })?;
            if !spec.prunable || self.residual_role(l) == Some(ResidualRole::First) {
                return Err(PcpError::Layer {
                    layer: l,
                    reason: "selection on a layer that does not own one".into(),
                });
            }
            let fits = sel.len() == conv.in_channels() || (self.compact && sel.nnz() == conv.in_channels());
            if !fits {
                return Err(PcpError::Layer {
                    layer: l,
                    reason: format!(
                        "selection covers {} channels, layer has {}",
                        sel.len(),
                        conv.in_channels()
                    ),
                });
            }
        }
        for (&entry, mask) in &self.samplers {
            if !matches!(self.layers.get(entry).map(|l| &l.op), Some(LayerOp::ResidualEntry)) {
                return Err(PcpError::Layer {
                    layer: entry,
                    reason: "sampler mask not attached to a residual entry".into(),
                });
            }
            let first = self.conv(entry + 1)?;
            let expected = if self.compact { mask.nnz() } else { mask.len() };
            if first.in_channels() != expected {
                return Err(PcpError::Layer {
                    layer: entry + 1,
                    reason: format!(
                        "sampler mask of {} channels ({} kept) does not fit a conv with {} inputs",
                        mask.len(),
                        mask.nnz(),
                        first.in_channels()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Shape entering each layer, followed by the final output shape.
    pub fn layer_input_shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape;
        let mut shortcut: Option<FeatureShape> = None;
        for (i, l) in self.layers.iter().enumerate() {
            shapes.push(cur);
            let err = |reason: String| PcpError::Layer { layer: i, reason };
            cur = match &l.op {
                LayerOp::Conv(c) => {
                    // A compacted conv may gather its kept channels from a
                    // wider incoming tensor.
                    let incoming = match self.gather_mask(i) {
                        Some(m) if m.nnz() == c.in_channels() => m.len(),
                        Some(m) => {
                            return Err(err(format!(
                                "gather mask keeps {} channels, conv expects {}",
                                m.nnz(),
                                c.in_channels()
                            )))
                        }
                        None => c.in_channels(),
                    };
                    if cur[0] != incoming {
                        return Err(err(format!(
                            "conv expects {incoming} input channels, receives {}",
                            cur[0]
                        )));
                    }
                    let (kh, kw) = c.kernel();
                    let h = conv_output_size(cur[1], kh, c.stride, c.pad).map_err(|e| err(e.to_string()))?;
                    let w = conv_output_size(cur[2], kw, c.stride, c.pad).map_err(|e| err(e.to_string()))?;
                    [c.out_channels(), h, w]
                }
                LayerOp::Fc(f) => {
                    let flat = cur[0] * cur[1] * cur[2];
                    if f.in_features() != flat {
                        return Err(err(format!(
                            "fc expects {} inputs, receives {flat} ({:?})",
                            f.in_features(),
                            cur
                        )));
                    }
                    [f.out_features(), 1, 1]
                }
                LayerOp::MaxPool { size, stride } => {
                    let h = conv_output_size(cur[1], *size, *stride, 0).map_err(|e| err(e.to_string()))?;
                    let w = conv_output_size(cur[2], *size, *stride, 0).map_err(|e| err(e.to_string()))?;
                    [cur[0], h, w]
                }
                LayerOp::Relu => cur,
                LayerOp::ResidualEntry => {
                    shortcut = Some(cur);
                    cur
                }
                LayerOp::ResidualExit => {
                    let s = shortcut.take().expect("structure checked");
                    if s != cur {
                        return Err(err(format!(
                            "branch output {cur:?} does not match shortcut {s:?}"
                        )));
                    }
                    cur
                }
            };
        }
        shapes.push(cur);
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(*self.layer_input_shapes()?.last().expect("at least the input shape"))
    }

    /// Returns a new model with the selection and weights of `layer` replaced.
    ///
    /// For a residual first convolution the block sampler is updated and the
    /// shortcut is untouched. Selections may only shrink.
    pub fn apply_selection(
        &self,
        layer: usize,
        beta: &ChannelSelection,
        new_weights: Tensor,
    ) -> Result<ModelGraph> {
        if self.compact {
            return Err(PcpError::Precondition(
                "cannot change selections of a compacted model".into(),
            ));
        }
        let spec = self.layers.get(layer).ok_or_else(|| PcpError::Layer {
            layer,
            reason: "no such layer".into(),
        })?;
        if !spec.prunable {
            return Err(PcpError::Layer {
                layer,
                reason: "layer is not prunable".into(),
            });
        }
        let conv = self.conv(layer)?;
        let current = self.input_mask(layer).expect("prunable layers own a mask");
        if beta.len() != current.len() {
            return Err(PcpError::Layer {
                layer,
                reason: format!(
                    "selection has {} entries, layer has {} input channels",
                    beta.len(),
                    current.len()
                ),
            });
        }
        if !beta.is_subset_of(current) {
            return Err(PcpError::Layer {
                layer,
                reason: "selection would revive a pruned channel".into(),
            });
        }
        if beta.nnz() == 0 {
            return Err(PcpError::Layer {
                layer,
                reason: "selection must keep at least one channel".into(),
            });
        }
        if new_weights.shape() != conv.weight.shape() {
            return Err(PcpError::Layer {
                layer,
                reason: format!(
                    "replacement weights {:?} do not match {:?}",
                    new_weights.shape(),
                    conv.weight.shape()
                ),
            });
        }
        let mut next = self.clone();
        if let LayerOp::Conv(c) = &mut next.layers[layer].op {
            c.weight = new_weights;
        }
        match self.residual_role(layer) {
            Some(ResidualRole::First) => {
                next.samplers.insert(layer - 1, beta.clone());
            }
            _ => {
                next.selections.insert(layer, beta.clone());
            }
        }
        Ok(next)
    }

    /// Replaces the weights and bias of a convolution or fully connected layer.
    pub fn with_layer_params(&self, layer: usize, weight: Tensor, bias: Vec<f32>) -> Result<ModelGraph> {
        let mut next = self.clone();
        match next.layers.get_mut(layer).map(|l| &mut l.op) {
            Some(LayerOp::Conv(c)) => {
                if weight.shape() != c.weight.shape() || bias.len() != c.bias.len() {
                    return Err(PcpError::Layer {
                        layer,
                        reason: "parameter shapes changed".into(),
                    });
                }
                c.weight = weight;
                c.bias = bias;
            }
            Some(LayerOp::Fc(f)) => {
                if weight.shape() != f.weight.shape() || bias.len() != f.bias.len() {
                    return Err(PcpError::Layer {
                        layer,
                        reason: "parameter shapes changed".into(),
                    });
                }
                f.weight = weight;
                f.bias = bias;
            }
            _ => {
                return Err(PcpError::Layer {
                    layer,
                    reason: "layer has no parameters".into(),
                })
            }
        }
        Ok(next)
    }

    /// Physically removes pruned channels: input channels of each masked
    /// convolution and, where possible, the producer's matching filters.
    /// Residual samplers (and masks without a producer) become channel gathers.
    pub fn export_compact(&self) -> Result<ModelGraph> {
        if self.compact {
            return Ok(self.clone());
        }
        let n = self.layers.len();
        let mut in_keep: Vec<Option<Vec<usize>>> = vec![None; n];
        let mut out_keep: Vec<Option<Vec<usize>>> = vec![None; n];
        let mut selections = BTreeMap::new();
        for l in self.conv_layers() {
            if let Some(mask) = self.input_mask(l) {
                in_keep[l] = Some(mask.kept());
                if self.removes_producer_filters(l) {
                    let p = self.producer(l).expect("checked");
                    out_keep[p] = Some(mask.kept());
                    if self.selections.contains_key(&l) {
                        selections.insert(l, ChannelSelection::all(mask.nnz()));
                    }
                } else if self.selections.contains_key(&l) {
                    // Gather from the full incoming tensor.
                    selections.insert(l, mask.clone());
                }
            }
        }
        let mut layers = self.layers.clone();
        for (l, spec) in layers.iter_mut().enumerate() {
            if let LayerOp::Conv(c) = &mut spec.op {
                let (o, i, kh, kw) = c.weight.dims4()?;
                let outs = out_keep[l].clone().unwrap_or_else(|| (0..o).collect());
                let ins = in_keep[l].clone().unwrap_or_else(|| (0..i).collect());
                let mut data = Vec::with_capacity(outs.len() * ins.len() * kh * kw);
                for &oc in &outs {
                    for &ic in &ins {
                        let start = ((oc * i) + ic) * kh * kw;
                        data.extend_from_slice(&c.weight.data()[start..start + kh * kw]);
                    }
                }
                c.weight = Tensor::new(vec![outs.len(), ins.len(), kh, kw], data)?;
                c.bias = outs.iter().map(|&oc| c.bias[oc]).collect();
            }
        }
        ModelGraph::from_parts(
            self.name.clone(),
            self.iteration,
            self.input_shape,
            layers,
            selections,
            self.samplers.clone(),
            true,
        )
    }

    /// Structural equality plus bit-identical parameters.
    pub fn bitwise_eq(&self, other: &ModelGraph) -> bool {
        self.name == other.name
            && self.iteration == other.iteration
            && self.input_shape == other.input_shape
            && self.compact == other.compact
            && self.selections == other.selections
            && self.samplers == other.samplers
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| layer_bitwise_eq(a, b))
    }
}

pub(crate) fn layer_bitwise_eq(a: &LayerSpec, b: &LayerSpec) -> bool {
    let bits = |x: &[f32], y: &[f32]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    a.prunable == b.prunable
        && match (&a.op, &b.op) {
            (LayerOp::Conv(x), LayerOp::Conv(y)) => {
                x.stride == y.stride && x.pad == y.pad && x.weight.bitwise_eq(&y.weight) && bits(&x.bias, &y.bias)
            }
            (LayerOp::Fc(x), LayerOp::Fc(y)) => x.weight.bitwise_eq(&y.weight) && bits(&x.bias, &y.bias),
            (x, y) => x == y,
        }
}

#[cfg(test)]
mod tests;
