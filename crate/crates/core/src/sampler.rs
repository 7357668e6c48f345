//! Extraction of the per-layer regression data: input patches of the model
//! being pruned and output responses of the original model, at sampled
//! spatial positions.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcpError, Result};
use crate::model::{LayerRecord, ModelGraph, ResidualRole};
use crate::numerics::{patch_at, ConvGeometry, Matrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Random,
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub positions_per_image: usize,
    pub mode: SamplingMode,
    /// Positions must have cross-channel variance strictly above this.
    pub variance_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            positions_per_image: 10,
            mode: SamplingMode::Random,
            variance_threshold: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.positions_per_image == 0 {
            return Err(PcpError::InvalidArgument("positions_per_image must be positive".into()));
        }
        if !(self.variance_threshold >= 0.0) {
            return Err(PcpError::InvalidArgument(format!(
                "variance threshold must be non-negative, got {}",
                self.variance_threshold
            )));
        }
        Ok(())
    }
}

/// Output-feature location `(image, y, x)` of one calibration row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    pub layer: usize,
    /// One `S x (kh*kw)` patch matrix per input channel of the layer.
    pub x_slices: Vec<Matrix>,
    /// `S x n` original responses with the layer bias removed.
    pub target: Matrix,
    pub positions: Vec<Position>,
    pub seed: u64,
}

impl CalibrationBatch {
    pub fn rows(&self) -> usize {
        self.target.rows()
    }

    pub fn num_channels(&self) -> usize {
        self.x_slices.len()
    }

    pub fn patch_len(&self) -> usize {
        self.x_slices.first().map_or(0, Matrix::cols)
    }

    pub fn num_outputs(&self) -> usize {
        self.target.cols()
    }

    pub fn bitwise_eq(&self, other: &CalibrationBatch) -> bool {
        let same = |a: &Matrix, b: &Matrix| {
            a.rows() == b.rows()
                && a.cols() == b.cols()
                && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        self.layer == other.layer
            && self.seed == other.seed
            && self.positions == other.positions
            && same(&self.target, &other.target)
            && self.x_slices.len() == other.x_slices.len()
            && self.x_slices.iter().zip(&other.x_slices).all(|(a, b)| same(a, b))
    }
}

/// Features of the original model, computed once per calibration set.
#[derive(Clone, Debug)]
pub struct ReferenceFeatures {
    records: BTreeMap<usize, LayerRecord>,
    num_images: usize,
}

impl ReferenceFeatures {
    /// Records every prunable layer of `original` and every residual entry.
    pub fn compute(original: &ModelGraph, images: &Tensor) -> Result<Self> {
        let layers = recording_layers(original, &original.prunable_layers());
        let records = original.forward(images, &layers)?.recorded;
        Ok(ReferenceFeatures {
            records,
            num_images: images.batch(),
        })
    }

    pub fn record(&self, layer: usize) -> Option<&LayerRecord> {
        self.records.get(&layer)
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }
}

/// Layers whose records are needed to build the batches of `layers`.
fn recording_layers(model: &ModelGraph, layers: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = layers.to_vec();
    for &l in layers {
        if model.residual_role(l) == Some(ResidualRole::Third) {
            out.push(model.block_of(l).expect("third conv sits in a block").0);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Population variance across channels at one location.
fn channel_variance(feature: &Tensor, image: usize, y: usize, x: usize) -> f64 {
    let (_, c, h, w) = feature.dims4().expect("rank-4 feature");
    let at = |ch: usize| feature.data()[((image * c + ch) * h + y) * w + x] as f64;
    let mean = (0..c).map(at).sum::<f64>() / c as f64;
    (0..c).map(|ch| (at(ch) - mean).powi(2)).sum::<f64>() / c as f64
}

/// Candidates whose cross-channel variance in `feature` exceeds `tau`, in order.
pub fn variance_filter(candidates: &[Position], feature: &Tensor, tau: f64) -> Result<Vec<Position>> {
    if !(tau >= 0.0) {
        return Err(PcpError::InvalidArgument(format!("variance threshold must be non-negative, got {tau}")));
    }
    let (n, _, h, w) = feature.dims4()?;
    if let Some(p) = candidates.iter().find(|p| p.image >= n || p.y >= h || p.x >= w) {
        return Err(PcpError::Shape(format!(
            "position {p:?} outside a feature of shape {:?}",
            feature.shape()
        )));
    }
    Ok(candidates
        .iter()
        .copied()
        .filter(|p| channel_variance(feature, p.image, p.y, p.x) > tau)
        .collect())
}

/// `y1 + y2 - y1_pruned`, the compensated target of a residual third conv.
/// Evaluated as `y2 + (y1 - y1_pruned)` so an unpruned shortcut returns `y2`
/// bit for bit.
pub fn residual_target(y1: &Tensor, y2: &Tensor, y1_pruned: &Tensor) -> Result<Tensor> {
    if y1.shape() != y2.shape() || y1.shape() != y1_pruned.shape() {
        return Err(PcpError::Shape(format!(
            "residual target operands {:?}, {:?}, {:?} differ",
            y1.shape(),
            y2.shape(),
            y1_pruned.shape()
        )));
    }
    let data = y1
        .data()
        .iter()
        .zip(y2.data())
        .zip(y1_pruned.data())
        .map(|((a, b), c)| b + (a - c))
        .collect();
    Tensor::new(y1.shape().to_vec(), data)
}

/// The generator used for position sampling at `layer`.
pub fn position_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

fn random_positions(rng: &mut ChaCha8Rng, image: usize, h: usize, w: usize, k: usize) -> Vec<Position> {
    index::sample(rng, h * w, k)
        .into_iter()
        .map(|i| Position { image, y: i / w, x: i % w })
        .collect()
}

/// Samples positions over the `[N, n, H', W']` output grid. Variance mode
/// scores the original model's layer input at the same coordinates.
fn sample_positions(
    cfg: &SamplerConfig,
    layer: usize,
    out_dims: (usize, usize, usize),
    variance_source: Option<&Tensor>,
) -> Result<Vec<Position>> {
    let (n, h, w) = out_dims;
    if cfg.positions_per_image > h * w {
        return Err(PcpError::InvalidArgument(format!(
            "{} positions per image requested from a {h}x{w} feature",
            cfg.positions_per_image
        )));
    }
    let mut rng = position_rng(cfg.seed, layer);
    let mut positions = Vec::with_capacity(n * cfg.positions_per_image);
    for image in 0..n {
        match (cfg.mode, variance_source) {
            (SamplingMode::Variance, Some(feature)) => {
                let candidates: Vec<Position> = (0..h * w)
                    .map(|i| Position { image, y: i / w, x: i % w })
                    .collect();
                let passing = variance_filter(&candidates, feature, cfg.variance_threshold)?;
                if passing.is_empty() {
                    warn!("layer {layer}, image {image}: no position passes the variance threshold, sampling at random");
                    positions.extend(random_positions(&mut rng, image, h, w, cfg.positions_per_image));
                } else if passing.len() <= cfg.positions_per_image {
                    if passing.len() < cfg.positions_per_image {
                        warn!(
                            "layer {layer}, image {image}: only {} positions pass the variance threshold",
                            passing.len()
                        );
                    }
                    positions.extend(passing);
                } else {
                    let mut chosen = index::sample(&mut rng, passing.len(), cfg.positions_per_image).into_vec();
                    chosen.sort_unstable();
                    positions.extend(chosen.into_iter().map(|i| passing[i]));
                }
            }
            _ => positions.extend(random_positions(&mut rng, image, h, w, cfg.positions_per_image)),
        }
    }
    Ok(positions)
}

fn gather_rows(feature: &Tensor, positions: &[Position], bias: &[f32]) -> Matrix {
    let (_, c, h, w) = feature.dims4().expect("rank-4 feature");
    Matrix::from_fn(positions.len(), c, |r, ch| {
        let p = positions[r];
        feature.data()[((p.image * c + ch) * h + p.y) * w + p.x] as f64 - bias[ch] as f64
    })
}

/// Builds the regression data for `layer`: input patches of `pruned` and
/// original responses (compensated for residual third convs).
pub fn collect_features(
    pruned: &ModelGraph,
    original: &ModelGraph,
    layer: usize,
    images: &Tensor,
    cfg: &SamplerConfig,
) -> Result<CalibrationBatch> {
    let layers = recording_layers(original, &[layer]);
    let reference = ReferenceFeatures {
        records: original.forward(images, &layers)?.recorded,
        num_images: images.batch(),
    };
    collect_features_cached(pruned, &reference, layer, images, cfg)
}

/// As [`collect_features`], reading original-model features from `reference`.
pub fn collect_features_cached(
    pruned: &ModelGraph,
    reference: &ReferenceFeatures,
    layer: usize,
    images: &Tensor,
    cfg: &SamplerConfig,
) -> Result<CalibrationBatch> {
    cfg.validate()?;
    let spec = pruned.layer(layer).ok_or_else(|| PcpError::Layer {
        layer,
        reason: "no such layer".into(),
    })?;
    if !spec.prunable {
        return Err(PcpError::Layer {
            layer,
            reason: "layer is not prunable".into(),
        });
    }
    if pruned.is_compact() {
        return Err(PcpError::Precondition("cannot collect features from a compacted model".into()));
    }
    if reference.num_images != images.batch() {
        return Err(PcpError::Shape(format!(
            "reference features cover {} images, batch has {}",
            reference.num_images,
            images.batch()
        )));
    }
    let conv = pruned.conv(layer)?;
    let role = pruned.residual_role(layer);
    let entry = match role {
        Some(ResidualRole::Third) => Some(pruned.block_of(layer).expect("in block").0),
        _ => None,
    };
    let mut record_at = vec![layer];
    record_at.extend(entry);
    let mut current = pruned.forward(images, &record_at)?.recorded;
    let own = current.remove(&layer).expect("recorded");
    let orig = reference.record(layer).ok_or_else(|| PcpError::Layer {
        layer,
        reason: "original features were not recorded".into(),
    })?;
    if orig.output.shape()[1] != conv.out_channels() || own.input.shape() != orig.input.shape() {
        return Err(PcpError::Layer {
            layer,
            reason: "pruned and original models disagree on this layer's shape".into(),
        });
    }

    let y0 = match entry {
        Some(e) => {
            let y1 = &reference.record(e).expect("entry recorded").input;
            let y1_pruned = &current[&e].input;
            residual_target(y1, &orig.output, y1_pruned)?
        }
        None => orig.output.clone(),
    };

    let (n, out_c, oh, ow) = y0.dims4()?;
    let variance_source = (cfg.mode == SamplingMode::Variance).then_some(&orig.input);
    if let Some(f) = variance_source {
        let (_, _, ih, iw) = f.dims4()?;
        if (ih, iw) != (oh, ow) {
            return Err(PcpError::Layer {
                layer,
                reason: "variance sampling needs matching input and output resolution".into(),
            });
        }
    }
    let positions = sample_positions(cfg, layer, (n, oh, ow), variance_source)?;
    let target = gather_rows(&y0, &positions, &conv.bias);
    debug_assert_eq!(target.cols(), out_c);

    let (_, c, h, w) = own.input.dims4()?;
    let (kh, kw) = conv.kernel();
    let geom = ConvGeometry::new(c, h, w, kh, kw, conv.stride, conv.pad)?;
    let p = kh * kw;
    let mut slices: Vec<Vec<f64>> = vec![Vec::with_capacity(positions.len() * p); c];
    let mut patch = vec![0.0f32; c * p];
    let item = c * h * w;
    for pos in &positions {
        let image = &own.input.data()[pos.image * item..(pos.image + 1) * item];
        patch_at(image, &geom, pos.y, pos.x, &mut patch);
        for (ch, slice) in slices.iter_mut().enumerate() {
            slice.extend(patch[ch * p..(ch + 1) * p].iter().map(|&v| v as f64));
        }
    }
    let x_slices = slices
        .into_iter()
        .map(|data| Matrix::new(positions.len(), p, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationBatch {
        layer,
        x_slices,
        target,
        positions,
        seed: cfg.seed,
    })
}
