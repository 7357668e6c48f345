//! Gradient checks: analytic backward passes against central differences of
//! the `f64` reference network.

use pcp_core::finetune::{backward, cross_entropy_loss};
use pcp_core::model::{ChannelSelection, Conv2d, LayerOp, LayerSpec, Linear, ModelGraph};
use pcp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Net64;

pub const INSTANCES: u64 = 20;
const COORDS: usize = 24;

fn conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize, stride: usize) -> LayerOp {
    let bias = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
    LayerOp::Conv(Conv2d {
        weight: Tensor::randn(&[out, inp, k, k], 0.5, rng),
        bias,
        stride,
        pad: k / 2,
    })
}

fn fc(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LayerOp {
    let bias = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
    LayerOp::Fc(Linear {
        weight: Tensor::randn(&[out, inp], 0.5, rng),
        bias,
    })
}

/// Norm-relative error between analytic gradients and central differences of
/// the `f64` reference network, on a random subset of every parameterised
/// layer's coordinates.
pub fn check_model(model: &ModelGraph, x: &Tensor, labels: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let (_, grads) = backward(model, x, labels).unwrap();
    let net = Net64::from_model(model);
    let mut worst = 0.0f64;
    for (layer, g) in grads.layers.iter().enumerate() {
        let Some((dw, db)) = g else { continue };
        let total = dw.len() + db.len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..COORDS.min(total) {
            let coord = rng.random_range(0..total);
            let a = if coord < dw.len() { dw.data()[coord] } else { db[coord - dw.len()] } as f64;
            let mut probe = net.clone();
            let p = *probe.param_mut(layer, coord);
            let h = 1e-6 * (1.0 + p.abs());
            *probe.param_mut(layer, coord) = p + h;
            let plus = probe.loss(x, labels);
            *probe.param_mut(layer, coord) = p - h;
            let minus = probe.loss(x, labels);
            analytic.push(a);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 1e-8 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Worst relative error of one layer kind over its seeded instances.
pub fn worst_error(build: fn(&mut ChaCha8Rng) -> (ModelGraph, usize)) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, k) = build(&mut rng);
            let [c, h, w] = model.input_shape();
            let x = Tensor::randn(&[3, c, h, w], 1.0, &mut rng);
            let y = labels(&mut rng, 3, k);
            check_model(&model, &x, &y, &mut rng)
        })
        .fold(0.0, f64::max)
}

pub fn build_linear(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let m = ModelGraph::new("fc", [2, 2, 2], vec![LayerSpec::new(fc(rng, 4, 8))]).unwrap();
        (m, 4)
}

pub fn build_conv(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let stride = 1 + rng.random_range(0..2usize);
        let k = if rng.random::<bool>() { 3 } else { 1 };
        let size = if stride == 2 { 5 } else { 4 };
        let oh = (size + 2 * (k / 2) - k) / stride + 1;
        let m = ModelGraph::new(
            "conv",
            [2, size, size],
            vec![LayerSpec::new(conv(rng, 3, 2, k, stride)), LayerSpec::new(fc(rng, 3, 3 * oh * oh))],
        )
        .unwrap();
        (m, 3)
}

pub fn build_relu(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let m = ModelGraph::new(
            "relu",
            [2, 4, 4],
            vec![
                LayerSpec::new(conv(rng, 3, 2, 3, 1)),
                LayerSpec::new(LayerOp::Relu),
                LayerSpec::new(fc(rng, 3, 48)),
            ],
        )
        .unwrap();
        (m, 3)
}

pub fn build_maxpool(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let m = ModelGraph::new(
            "pool",
            [2, 4, 4],
            vec![
                LayerSpec::new(conv(rng, 3, 2, 3, 1)),
                LayerSpec::new(LayerOp::MaxPool { size: 2, stride: 2 }),
                LayerSpec::new(fc(rng, 3, 12)),
            ],
        )
        .unwrap();
        (m, 3)
}

pub fn build_residual(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let m = ModelGraph::new(
            "res",
            [2, 4, 4],
            vec![
                LayerSpec::new(conv(rng, 3, 2, 3, 1)),
                LayerSpec::new(LayerOp::ResidualEntry),
                LayerSpec::prunable(conv(rng, 3, 3, 1, 1)),
                LayerSpec::new(LayerOp::Relu),
                LayerSpec::prunable(conv(rng, 3, 3, 3, 1)),
                LayerSpec::new(LayerOp::Relu),
                LayerSpec::prunable(conv(rng, 3, 3, 1, 1)),
                LayerSpec::new(LayerOp::ResidualExit),
                LayerSpec::new(fc(rng, 3, 48)),
            ],
        )
        .unwrap();
        (m, 3)
}

pub fn build_masked_conv(rng: &mut ChaCha8Rng) -> (ModelGraph, usize) {
        let m = ModelGraph::new(
            "masked",
            [2, 4, 4],
            vec![
                LayerSpec::new(conv(rng, 4, 2, 3, 1)),
                LayerSpec::prunable(conv(rng, 3, 4, 3, 1)),
                LayerSpec::new(fc(rng, 3, 48)),
            ],
        )
        .unwrap();
        let dropped = rng.random_range(0..4usize);
        let kept: Vec<usize> = (0..4).filter(|&i| i != dropped).collect();
        let sel = ChannelSelection::from_kept(4, &kept).unwrap();
        let w = m.conv(1).unwrap().weight.clone();
        (m.apply_selection(1, &sel, w).unwrap(), 3)
}

pub const KINDS: [(&str, fn(&mut ChaCha8Rng) -> (ModelGraph, usize)); 6] = [
    ("linear", build_linear),
    ("conv", build_conv),
    ("relu", build_relu),
    ("maxpool", build_maxpool),
    ("residual", build_residual),
    ("masked conv", build_masked_conv),
];

/// Worst relative error of the softmax cross-entropy gradient.
/// Mean cross-entropy of `f64` logits, written from the definition.
fn cross_entropy64(z: &[f64], k: usize, y: &[usize]) -> f64 {
    let total: f64 = z
        .chunks(k)
        .zip(y)
        .map(|(row, &t)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[t]
        })
        .sum();
    total / y.len() as f64
}

pub fn cross_entropy_worst_error() -> f64 {
    let mut overall = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (1 + seed as usize % 4, 2 + seed as usize % 5);
        let logits = Tensor::randn(&[n, k], 2.0, &mut rng);
        let y = labels(&mut rng, n, k);
        let (_, g) = cross_entropy_loss(&logits, &y).unwrap();
        let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let mut worst = 0.0f64;
        for i in 0..n * k {
            let h = 1e-5;
            let (mut p, mut m) = (z.clone(), z.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (cross_entropy64(&p, k, &y) - cross_entropy64(&m, k, &y)) / (2.0 * h);
            worst = worst.max((fd - g.data()[i] as f64).abs() / (fd.abs().max(g.data()[i].abs() as f64).max(1e-3)));
        }
        overall = overall.max(worst);
    }
    overall
}
