//! Single-layer channel pruning: a LASSO penalty ramp that drives the
//! channel-selection vector down to an exact cardinality, alternated with
//! least-squares reconstruction of the surviving weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PcpError, Result};
use crate::model::{ChannelSelection, ModelGraph};
use crate::numerics::{lasso_cd_with, least_squares, DesignMatrix, LassoSettings, Matrix};
use crate::sampler::{collect_features_cached, CalibrationBatch, ReferenceFeatures, SamplerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaRamp {
    /// First penalty as a fraction of `lambda_max`.
    pub initial_factor: f64,
    pub growth: f64,
    pub max_steps: usize,
}

impl Default for LambdaRamp {
    fn default() -> Self {
        LambdaRamp {
            initial_factor: 1e-4,
            growth: 2.0,
            max_steps: 64,
        }
    }
}

impl LambdaRamp {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_factor >= 0.0) || !(self.growth > 1.0) || self.max_steps == 0 {
            return Err(PcpError::InvalidArgument(format!(
                "lambda ramp needs initial_factor >= 0, growth > 1 and at least one step, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PruneRequest<'a> {
    pub batch: &'a CalibrationBatch,
    pub current_selection: &'a ChannelSelection,
    /// `[n, c, kh, kw]`
    pub current_weights: &'a Tensor,
    pub channels_to_remove: usize,
    pub ramp: LambdaRamp,
    pub lasso: LassoSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneResult {
    pub selection: ChannelSelection,
    pub weights: Tensor,
    /// Squared Frobenius residual on the calibration batch.
    pub reconstruction_error: f64,
    pub lambda_used: f64,
}

/// `vec(X_i W_i^T)` for every input channel.
fn design_columns(batch: &CalibrationBatch, weights: &Tensor) -> Vec<Vec<f64>> {
    let (s, p, n) = (batch.rows(), batch.patch_len(), batch.num_outputs());
    let c = batch.num_channels();
    (0..c)
        .map(|ch| {
            let x = &batch.x_slices[ch];
            let mut col = vec![0.0f64; s * n];
            for o in 0..n {
                let w = &weights.data()[(o * c + ch) * p..(o * c + ch + 1) * p];
                for r in 0..s {
                    let row = x.row(r);
                    col[r * n + o] = row.iter().zip(w).map(|(a, &b)| a * b as f64).sum();
                }
            }
            col
        })
        .collect()
}

/// Least-squares weights on `support` (other channels zero) and the
/// resulting squared residual.
pub fn reconstruct(batch: &CalibrationBatch, support: &[usize], shape: &[usize]) -> Result<(Tensor, f64)> {
    let (s, p, n) = (batch.rows(), batch.patch_len(), batch.num_outputs());
    let c = batch.num_channels();
    let a = Matrix::from_fn(s, support.len() * p, |r, col| batch.x_slices[support[col / p]][(r, col % p)]);
    let sol = least_squares(&a, &batch.target)?;
    let residual = a.matmul(&sol)?.sub(&batch.target)?.frobenius_sq();
    let mut w = Tensor::zeros(shape);
    for (k, &ch) in support.iter().enumerate() {
        for o in 0..n {
            for q in 0..p {
                w.data_mut()[(o * c + ch) * p + q] = sol[(k * p + q, o)] as f32;
            }
        }
    }
    if !w.all_finite() {
        return Err(PcpError::Solver("reconstruction produced non-finite weights".into()));
    }
    Ok((w, residual))
}

/// Squared residual of `weights` on the batch.
pub fn reconstruction_error(batch: &CalibrationBatch, weights: &Tensor) -> f64 {
    let (s, n) = (batch.rows(), batch.num_outputs());
    let cols = design_columns(batch, weights);
    let mut total = 0.0;
    for r in 0..s {
        for o in 0..n {
            let pred: f64 = cols.iter().map(|z| z[r * n + o]).sum();
            total += (batch.target[(r, o)] - pred).powi(2);
        }
    }
    total
}

/// Removes exactly `channels_to_remove` of the currently kept channels.
pub fn select_and_reconstruct(req: &PruneRequest<'_>) -> Result<PruneResult> {
    req.ramp.validate()?;
    let batch = req.batch;
    let c = batch.num_channels();
    let sel = req.current_selection;
    let nnz = sel.nnz();
    if req.channels_to_remove == 0 || req.channels_to_remove >= nnz {
        return Err(PcpError::Precondition(format!(
            "must remove between 1 and {} of {nnz} kept channels, asked for {}",
            nnz.saturating_sub(1),
            req.channels_to_remove
        )));
    }
    let shape = req.current_weights.shape();
    if sel.len() != c
        || shape.len() != 4
        || shape[0] != batch.num_outputs()
        || shape[1] != c
        || shape[2] * shape[3] != batch.patch_len()
    {
        return Err(PcpError::Shape(format!(
            "weights {:?} and selection of {} do not fit a batch with {c} channels, {} outputs, patch {}",
            shape,
            sel.len(),
            batch.num_outputs(),
            batch.patch_len()
        )));
    }
    if batch.rows() == 0 {
        return Err(PcpError::Precondition("empty calibration batch".into()));
    }
    let target_nnz = nnz - req.channels_to_remove;
    let target_vec: Vec<f64> = batch.target.data().to_vec();

    let mut support: Vec<usize> = sel.kept();
    let mut weights = req.current_weights.clone();
    let mut design = DesignMatrix::new(design_columns(batch, &weights), target_vec.clone())?;
    let frozen = |support: &[usize]| -> Vec<bool> {
        let mut f = vec![true; c];
        support.iter().for_each(|&i| f[i] = false);
        f
    };

    let lambda_max = design.lambda_max(&frozen(&support));
    let mut prev_lambda = 0.0;
    let mut lambda = req.ramp.initial_factor * lambda_max;
    let mut reached = false;
    for _ in 0..req.ramp.max_steps {
        let beta = lasso_cd_with(&design, lambda, &frozen(&support), req.lasso)?.beta;
        let survivors: Vec<usize> = support.iter().copied().filter(|&i| beta[i] != 0.0).collect();
        if survivors.len() <= target_nnz {
            support = if survivors.len() < target_nnz {
                let prev = lasso_cd_with(&design, prev_lambda, &frozen(&support), req.lasso)?.beta;
                repair(&support, &survivors, &prev, target_nnz)
            } else {
                survivors
            };
            reached = true;
            break;
        }
        if survivors.len() < support.len() {
            support = survivors;
            weights = reconstruct(batch, &support, shape)?.0;
            design = DesignMatrix::new(design_columns(batch, &weights), target_vec.clone())?;
        }
        prev_lambda = lambda;
        lambda = if lambda > 0.0 {
            lambda * req.ramp.growth
        } else {
            (1e-4 * lambda_max).max(f64::MIN_POSITIVE)
        };
    }
    if !reached {
        return Err(PcpError::Solver(format!(
            "lambda ramp ended with {} channels after {} steps, target {target_nnz}",
            support.len(),
            req.ramp.max_steps
        )));
    }
    let (weights, reconstruction_error) = reconstruct(batch, &support, shape)?;
    Ok(PruneResult {
        selection: ChannelSelection::from_kept(c, &support)?,
        weights,
        reconstruction_error,
        lambda_used: lambda,
    })
}

/// Re-adds channels dropped in the last step, largest previous `|beta|`
/// first (lower index on ties), until `target` channels are kept.
fn repair(support: &[usize], survivors: &[usize], prev_beta: &[f64], target: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = survivors.to_vec();
    let mut dropped: Vec<usize> = support.iter().copied().filter(|i| !survivors.contains(i)).collect();
    dropped.sort_by(|&a, &b| prev_beta[b].abs().total_cmp(&prev_beta[a].abs()).then(a.cmp(&b)));
    kept.extend(dropped.into_iter().take(target.saturating_sub(survivors.len())));
    kept.sort_unstable();
    kept
}

/// One trial pruning of `layer` and the validation accuracy of the hybrid model.
#[derive(Clone, Debug)]
pub struct Attempt {
    pub layer: usize,
    pub channels_to_remove: usize,
    pub result: PruneResult,
    pub accuracy: f64,
}

/// Settings shared by attempts and commits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerPruneConfig {
    pub sampler: SamplerConfig,
    pub ramp: LambdaRamp,
    #[serde(skip)]
    pub lasso: LassoSettings,
}

fn prune_layer(
    state: &ModelGraph,
    reference: &ReferenceFeatures,
    layer: usize,
    f: usize,
    images: &Tensor,
    cfg: &LayerPruneConfig,
) -> Result<PruneResult> {
    let batch = collect_features_cached(state, reference, layer, images, &cfg.sampler)?;
    let selection = state.input_mask(layer).ok_or_else(|| PcpError::Layer {
        layer,
        reason: "layer owns no channel mask".into(),
    })?;
    let weights = &state.conv(layer)?.weight;
    select_and_reconstruct(&PruneRequest {
        batch: &batch,
        current_selection: selection,
        current_weights: weights,
        channels_to_remove: f,
        ramp: cfg.ramp,
        lasso: cfg.lasso,
    })
    .map_err(|e| PcpError::Layer {
        layer,
        reason: e.to_string(),
    })
}

/// Prunes `layer` of `state` in isolation and scores the result on `val`.
/// `state` is not modified.
pub fn attempt_prune(
    state: &ModelGraph,
    reference: &ReferenceFeatures,
    layer: usize,
    f: usize,
    images: &Tensor,
    val: &Dataset,
    cfg: &LayerPruneConfig,
) -> Result<Attempt> {
    let result = prune_layer(state, reference, layer, f, images, cfg)?;
    let hybrid = state.apply_selection(layer, &result.selection, result.weights.clone())?;
    let accuracy = hybrid.accuracy(&val.images, val.labels()?)?;
    Ok(Attempt {
        layer,
        channels_to_remove: f,
        result,
        accuracy,
    })
}

/// Prunes `layers` shallow to deep, re-collecting features from the partially
/// pruned model before each one. Returns the new model, or the first error
/// with `state` untouched.
pub fn prune_committed(
    state: &ModelGraph,
    reference: &ReferenceFeatures,
    layers: &[usize],
    f: &BTreeMap<usize, usize>,
    images: &Tensor,
    cfg: &LayerPruneConfig,
) -> Result<(ModelGraph, Vec<PruneResult>)> {
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PcpError::Precondition(format!(
            "committed layers must be strictly ascending, got {layers:?}"
        )));
    }
    let mut current = state.clone();
    let mut results = Vec::with_capacity(layers.len());
    for &l in layers {
        let count = *f.get(&l).ok_or_else(|| PcpError::Layer {
            layer: l,
            reason: "no channel count scheduled".into(),
        })?;
        let r = prune_layer(&current, reference, l, count, images, cfg)?;
        current = current.apply_selection(l, &r.selection, r.weights.clone())?;
        results.push(r);
    }
    Ok((current, results))
}
