//! Mini-batch SGD with softmax cross-entropy, and the backward passes it
//! needs. Channels masked by a selection or sampler receive no gradient, so
//! training never revives a pruned channel.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PcpError, Result};
use crate::model::forward::{add, linear_forward, mask_channels, maxpool_forward, relu};
use crate::model::{LayerOp, ModelGraph};
use crate::numerics::{col2im, conv2d_forward, gemm, gemm_at, gemm_bt, im2col, ConvGeometry};
use crate::tensor::Tensor;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PcpError::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PcpError::InvalidArgument("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(PcpError::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PcpError::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    if n == 0 {
        return Err(PcpError::InvalidArgument("loss of an empty batch".into()));
    }
    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]] as f64;
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - log_z).exp();
            let y = if j == labels[i] { 1.0 } else { 0.0 };
            grad[i * k + j] = ((p - y) / n as f64) as f32;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Parameter gradients, indexed like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<(Tensor, Vec<f32>)>>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|(w, b)| w.all_finite() && b.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer inputs kept for the backward pass.
struct Tape {
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

fn forward_tape(model: &ModelGraph, x: &Tensor) -> Result<(Tensor, Tape)> {
    let layers = model.layers();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pool_argmax = vec![None; layers.len()];
    let mut cur = x.clone();
    let mut shortcut: Option<Tensor> = None;
    for (i, spec) in layers.iter().enumerate() {
        let out = match &spec.op {
            LayerOp::Conv(c) => {
                let input = model.conv_input(i, &cur)?;
                conv2d_forward(&input, &c.weight, &c.bias, c.stride, c.pad)?
            }
            LayerOp::Fc(f) => linear_forward(&cur, f)?,
            LayerOp::MaxPool { size, stride } => {
                let (y, arg) = maxpool_forward(&cur, *size, *stride);
                pool_argmax[i] = Some(arg);
                y
            }
            LayerOp::Relu => relu(&cur),
            LayerOp::ResidualEntry => {
                shortcut = Some(cur.clone());
                cur.clone()
            }
            LayerOp::ResidualExit => add(&cur, shortcut.as_ref().expect("structure checked"))?,
        };
        inputs.push(std::mem::replace(&mut cur, out));
    }
    let n = cur.batch();
    let k = cur.item_len();
    Ok((cur.reshape(vec![n, k])?, Tape { inputs, pool_argmax }))
}

/// Gradients of `conv(x)` with respect to weights, bias and `x`.
pub fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f32>, Tensor)> {
    let (batch, c, h, w) = x.dims4()?;
    let (n, _, kh, kw) = weight.dims4()?;
    let g = ConvGeometry::new(c, h, w, kh, kw, stride, pad)?;
    let positions = g.out_positions();
    let patch = g.patch_len();
    if dy.shape() != [batch, n, g.out_h, g.out_w] {
        return Err(PcpError::Shape(format!(
            "output gradient {:?} does not match the conv output",
            dy.shape()
        )));
    }
    let mut dw = vec![0.0f64; n * patch];
    let mut db = vec![0.0f64; n];
    let mut dx = Vec::with_capacity(batch * c * h * w);
    let item = c * h * w;
    for b in 0..batch {
        let cols = im2col(&x.data()[b * item..(b + 1) * item], &g);
        let dyb = &dy.data()[b * n * positions..(b + 1) * n * positions];
        let dwb = gemm_bt(dyb, &cols, n, positions, patch);
        dw.iter_mut().zip(&dwb).for_each(|(a, &v)| *a += v as f64);
        for (o, row) in dyb.chunks(positions).enumerate() {
            db[o] += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        let dcols = gemm_at(weight.data(), dyb, patch, n, positions);
        dx.extend(col2im(&dcols, &g));
    }
    Ok((
        Tensor::new(weight.shape().to_vec(), dw.into_iter().map(|v| v as f32).collect())?,
        db.into_iter().map(|v| v as f32).collect(),
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

/// Gradients of `x W^T + b` with respect to `W`, `b` and `x`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<f32>, Tensor)> {
    let n = x.batch();
    let input = x.item_len();
    let out = weight.shape()[0];
    if dy.shape() != [n, out] {
        return Err(PcpError::Shape(format!("output gradient {:?} for {n}x{out}", dy.shape())));
    }
    let dw = gemm_at(dy.data(), x.data(), out, n, input);
    let db = (0..out)
        .map(|o| (0..n).map(|i| dy.data()[i * out + o] as f64).sum::<f64>() as f32)
        .collect();
    let dx = gemm(dy.data(), weight.data(), n, out, input);
    Ok((
        Tensor::new(vec![out, input], dw)?,
        db,
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Routes each output gradient to the input element that won the max.
pub fn maxpool_backward(x: &Tensor, argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = vec![0.0f64; x.len()];
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx[idx] += g as f64;
    }
    Tensor::new(x.shape().to_vec(), dx.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

/// Mean loss over the batch and the gradient of every parameter.
pub fn backward(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    if model.is_compact() {
        return Err(PcpError::Precondition("training runs on masked, not compacted, models".into()));
    }
    let (logits, tape) = forward_tape(model, x)?;
    let (loss, dlogits) = cross_entropy_loss(&logits, labels)?;
    let layers = model.layers();
    let mut grads: Vec<Option<(Tensor, Vec<f32>)>> = vec![None; layers.len()];
    let mut dy = dlogits;
    // Gradient arriving at the block exit, added back at its entry.
    let mut shortcut_grad: Option<Tensor> = None;
    for i in (0..layers.len()).rev() {
        let x_in = &tape.inputs[i];
        dy = match &layers[i].op {
            LayerOp::Fc(f) => {
                let (dw, db, dx) = linear_backward(x_in, &f.weight, &dy)?;
                grads[i] = Some((dw, db));
                dx
            }
            LayerOp::Conv(c) => {
                let masked = model.conv_input(i, x_in)?;
                let (mut dw, db, dx) = conv_backward(&masked, &c.weight, c.stride, c.pad, &dy)?;
                match model.input_mask(i) {
                    Some(mask) if !mask.is_full() => {
                        let (o, cin, kh, kw) = dw.dims4()?;
                        let k = kh * kw;
                        for oc in 0..o {
                            for ic in (0..cin).filter(|&ic| !mask.is_kept(ic)) {
                                let start = (oc * cin + ic) * k;
                                dw.data_mut()[start..start + k].fill(0.0);
                            }
                        }
                        grads[i] = Some((dw, db));
                        mask_channels(&dx, mask)?
                    }
                    _ => {
                        grads[i] = Some((dw, db));
                        dx
                    }
                }
            }
            LayerOp::Relu => relu_backward(x_in, &dy),
            LayerOp::MaxPool { .. } => {
                maxpool_backward(x_in, tape.pool_argmax[i].as_ref().expect("recorded"), &dy)
            }
            LayerOp::ResidualExit => {
                shortcut_grad = Some(dy.clone());
                dy
            }
            LayerOp::ResidualEntry => {
                let s = shortcut_grad.take().expect("structure checked");
                add(&dy, &s)?
            }
        };
    }
    Ok((loss, Gradients { layers: grads }))
}

/// `theta - lr * grad` on every parameterised layer.
pub fn sgd_step(model: &ModelGraph, grads: &Gradients, lr: f64) -> Result<ModelGraph> {
    let mut next = model.clone();
    for (i, g) in grads.layers.iter().enumerate() {
        let Some((dw, db)) = g else { continue };
        let (w, b) = match &model.layers()[i].op {
            LayerOp::Conv(c) => (&c.weight, &c.bias),
            LayerOp::Fc(f) => (&f.weight, &f.bias),
            _ => continue,
        };
        let step = |p: &[f32], d: &[f32]| -> Vec<f32> {
            p.iter().zip(d).map(|(&p, &d)| (p as f64 - lr * d as f64) as f32).collect()
        };
        let w = Tensor::new(w.shape().to_vec(), step(w.data(), dw.data()))?;
        next = next.with_layer_params(i, w, step(b, db))?;
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Trains `model` on `train`, evaluating on `val` after every epoch.
pub fn sgd_finetune(
    model: &ModelGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochLog>)> {
    cfg.validate()?;
    let labels = train.labels()?;
    if train.is_empty() {
        return Err(PcpError::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut current = model.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train.images.select_batch(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = backward(&current, &x, &y)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(PcpError::Diverged { epoch, step, loss });
            }
            total += loss * chunk.len() as f64;
            if cfg.learning_rate > 0.0 {
                current = sgd_step(&current, &grads, cfg.learning_rate)?;
            }
        }
        let val_accuracy = match val {
            Some(v) => Some(current.accuracy(&v.images, v.labels()?)?),
            None => None,
        };
        let loss = total / train.len() as f64;
        info!("epoch {epoch}: loss {loss:.5}, val accuracy {val_accuracy:?}");
        log.push(EpochLog {
            epoch,
            loss,
            val_accuracy,
        });
    }
    Ok((current, log))
}

pub fn write_train_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut csv = String::from("epoch,loss,val_accuracy\n");
    for e in log {
        let acc = e.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.loss, acc));
    }
    fs::write(path, csv).map_err(|e| PcpError::io(path, e))
}
