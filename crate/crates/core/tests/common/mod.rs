//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance suite. Oracles use nalgebra or plain loops, never the library
//! routine they check.
#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::DMatrix;
use pcp_core::data::Dataset;
use pcp_core::finetune::{sgd_finetune, TrainConfig};
use pcp_core::model::{ChannelSelection, ModelGraph};
use pcp_core::numerics::LassoSettings;
use pcp_core::prune::{select_and_reconstruct, LambdaRamp, PruneRequest};
use pcp_core::numerics::{least_squares, Matrix};
use pcp_core::pcp::{FSchedule, PruneConfig};
use pcp_core::sampler::CalibrationBatch;
use pcp_core::toybench::{build_reference_model, Architecture, Augmentation, GeneratorSpec, ToyBench};
use pcp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const CALIB_IMAGES: usize = 128;

pub fn bench(seed: u64) -> ToyBench {
    GeneratorSpec {
        seed,
        test: 512,
        ..GeneratorSpec::default()
    }
    .generate_all()
    .unwrap()
}

pub fn reference_recipe(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        epochs: 10,
        batch_size: 32,
        seed,
    }
}

/// Schedule sized for 16 to 32 channel layers.
pub fn desk_schedule() -> FSchedule {
    FSchedule {
        early_fraction: 0.1,
        late_fraction: 0.05,
        cap: 2,
        ..FSchedule::default()
    }
}

pub fn desk_config(target_ratio: f64) -> PruneConfig {
    PruneConfig {
        target_ratio,
        schedule: desk_schedule(),
        ..PruneConfig::default()
    }
}

pub fn train(arch: Architecture, data: &Dataset, seed: u64, cfg: &TrainConfig) -> ModelGraph {
    let [c, h, _] = [data.images.shape()[1], data.images.shape()[2], data.images.shape()[3]];
    let init = build_reference_model(arch, c, h, data.num_classes, seed).unwrap();
    sgd_finetune(&init, data, None, cfg).unwrap().0
}

pub fn trained_vgg(b: &ToyBench, seed: u64) -> ModelGraph {
    train(Architecture::TinyVgg, &b.source_train, seed, &reference_recipe(seed))
}

/// Reference model trained with generic photometric augmentation, standing in
/// for a domain-adapted initial model.
pub fn adapted_vgg(b: &ToyBench, seed: u64) -> ModelGraph {
    let aug = Augmentation {
        seed,
        ..Augmentation::default()
    };
    let data = aug.apply(&b.source_train).unwrap();
    train(Architecture::TinyVgg, &data, seed, &reference_recipe(seed))
}

pub fn accuracy(m: &ModelGraph, d: &Dataset) -> f64 {
    m.accuracy(&d.images, d.labels().unwrap()).unwrap()
}

pub fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Minimum-norm least squares `V L^+ V^T A^T B` from the symmetric
/// eigendecomposition `A^T A = V L V^T`. Accurate for the well-conditioned
/// and exactly rank-deficient instances the tests build.
pub fn pinv_lstsq(a: &Matrix, b: &Matrix) -> DMatrix<f64> {
    let a = to_dmatrix(a);
    let ata = a.transpose() * &a;
    let eig = ata.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let recon = v * DMatrix::from_diagonal(&eig.eigenvalues) * v.transpose();
    assert!((recon - &ata).norm() <= 1e-10 * (1.0 + ata.norm()), "eigendecomposition failed");
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let inv = eig.eigenvalues.map(|l| if l > 1e-12 * lmax { 1.0 / l } else { 0.0 });
    v * DMatrix::from_diagonal(&inv) * v.transpose() * a.transpose() * to_dmatrix(b)
}

pub fn residual_sq(a: &Matrix, x: &DMatrix<f64>, b: &Matrix) -> f64 {
    (to_dmatrix(b) - to_dmatrix(a) * x).norm_squared()
}

/// `(||B - A X|| - ||B - A X*||) / ||B||` against the pseudoinverse oracle.
pub fn lstsq_gap(a: &Matrix, b: &Matrix) -> f64 {
    let ours = least_squares(a, b).unwrap();
    let ours = to_dmatrix(&ours);
    let oracle = pinv_lstsq(a, b);
    let scale = to_dmatrix(b).norm().max(1e-300);
    (residual_sq(a, &ours, b).sqrt() - residual_sq(a, &oracle, b).sqrt()) / scale
}

/// Instance with `rank <= k` columns when `deficient`.
pub fn lstsq_instance(seed: u64, m: usize, k: usize, p: usize, deficient: bool) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = random_matrix(&mut rng, m, k);
    if deficient && k >= 2 {
        let src = rng.random_range(0..k - 1);
        let scale: f64 = rng.random_range(-2.0..2.0);
        for r in 0..m {
            a[(r, k - 1)] = scale * a[(r, src)];
        }
    }
    (a, random_matrix(&mut rng, m, p))
}

/// Largest violation of the LASSO optimality conditions
/// `-2 z_i^T r + lambda sign(b_i) = 0` and `|2 z_i^T r| <= lambda` at zero.
pub fn stationarity_violation(columns: &[Vec<f64>], y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let mut r = y.to_vec();
    for (z, &b) in columns.iter().zip(beta) {
        for (ri, zi) in r.iter_mut().zip(z) {
            *ri -= b * zi;
        }
    }
    columns
        .iter()
        .zip(beta)
        .map(|(z, &b)| {
            let g = -2.0 * z.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            if b > 0.0 {
                (g + lambda).abs()
            } else if b < 0.0 {
                (g - lambda).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn lasso_instance(seed: u64, rows: usize, c: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<f64>> = (0..c).map(|_| (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    (cols, y)
}

/// Direct seven-loop cross-correlation in `f64`.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Vec<f64> {
    let (s, k) = (x.shape(), w.shape());
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (o, kh, kw) = (k[0], k[2], k[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Calibration batch whose target is an exact linear function of `c`
/// channels with `p`-wide patches, plus Gaussian-like noise. Channel `i` is
/// scaled by a random importance so instances have a non-trivial optimum.
pub fn synthetic_batch(seed: u64, rows: usize, c: usize, p: usize, n: usize, noise: f64) -> (CalibrationBatch, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_slices: Vec<Matrix> = (0..c).map(|_| random_matrix(&mut rng, rows, p)).collect();
    let importance: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
    let w: Vec<f32> = (0..n * c * p)
        .map(|i| (rng.random_range(-1.0..1.0) * importance[(i / p) % c]) as f32)
        .collect();
    let weights = Tensor::new(vec![n, c, 1, p], w).unwrap();
    let target = Matrix::from_fn(rows, n, |r, o| {
        let mut acc = 0.0;
        for (ch, x) in x_slices.iter().enumerate() {
            for j in 0..p {
                acc += x[(r, j)] * weights.data()[(o * c + ch) * p + j] as f64;
            }
        }
        acc + noise * rng.random_range(-1.0..1.0)
    });
    let batch = CalibrationBatch {
        layer: 0,
        x_slices,
        target,
        positions: Vec::new(),
        seed,
    };
    (batch, weights)
}

/// Squared residual of the best reconstruction from channels `support`.
pub fn support_residual(batch: &CalibrationBatch, support: &[usize]) -> f64 {
    let p = batch.patch_len();
    let a = Matrix::from_fn(batch.rows(), support.len() * p, |r, j| batch.x_slices[support[j / p]][(r, j % p)]);
    let x = pinv_lstsq(&a, &batch.target);
    residual_sq(&a, &x, &batch.target)
}

/// Optimum over every support of size `keep`.
pub fn exhaustive_best(batch: &CalibrationBatch, keep: usize) -> (f64, Vec<usize>) {
    let c = batch.num_channels();
    let mut best = (f64::INFINITY, Vec::new());
    for bits in 0u32..(1 << c) {
        if bits.count_ones() as usize != keep {
            continue;
        }
        let support: Vec<usize> = (0..c).filter(|i| bits >> i & 1 == 1).collect();
        let r = support_residual(batch, &support);
        if r < best.0 {
            best = (r, support);
        }
    }
    best
}

pub fn request<'a>(
    batch: &'a CalibrationBatch,
    sel: &'a ChannelSelection,
    w: &'a Tensor,
    f: usize,
) -> PruneRequest<'a> {
    PruneRequest {
        batch,
        current_selection: sel,
        current_weights: w,
        channels_to_remove: f,
        ramp: LambdaRamp::default(),
        lasso: LassoSettings::default(),
    }
}

/// `(ours / optimum, ours, optimum)` for one brute-force instance.
pub fn brute_force_ratio(seed: u64) -> (f64, f64, f64) {
    let c = 4 + (seed % 5) as usize;
    let (batch, w) = synthetic_batch(seed, 60, c, 3, 4, 0.05);
    let sel = ChannelSelection::all(c);
    let r = select_and_reconstruct(&request(&batch, &sel, &w, c / 2)).unwrap();
    let (best, _) = exhaustive_best(&batch, c - c / 2);
    (r.reconstruction_error / best, r.reconstruction_error, best)
}

/// Hand-counted multiply-accumulates of the reference networks on 3x8x8
/// inputs with 4 classes.
pub const TINY_VGG_FLOPS: u64 = 8 * 8 * 16 * 3 * 9 + 8 * 8 * 16 * 16 * 9 + 4 * 4 * 32 * 16 * 9 + 4 * 4 * 32 * 32 * 9 + 4 * 32 * 2 * 2;
pub const TINY_RES_FLOPS: u64 =
    8 * 8 * 16 * 3 * 9 + 8 * 8 * 16 * 16 * 9 + 4 * 4 * 16 * 16 + 4 * 4 * 16 * 16 * 9 + 4 * 4 * 16 * 16 + 4 * 16 * 2 * 2;

/// FLOPs counted directly from the layer list and the kept-channel counts,
/// independently of the library's accounting.
pub fn independent_flops(m: &ModelGraph) -> u64 {
    use pcp_core::model::LayerOp;
    let [mut c, mut h, mut w] = m.input_shape();
    let layers = m.layers();
    let mut total = 0u64;
    for (i, l) in layers.iter().enumerate() {
        match &l.op {
            LayerOp::Conv(conv) => {
                let s = conv.weight.shape();
                let (o, kh, kw) = (s[0], s[2], s[3]);
                let oh = (h + 2 * conv.pad - kh) / conv.stride + 1;
                let ow = (w + 2 * conv.pad - kw) / conv.stride + 1;
                let cin = m.input_mask(i).map_or(c, |sel| sel.nnz());
                // Output channels the next consumer reads; all of them when the
                // consumer does not prune or sits behind a shortcut.
                let mut out_eff = o;
                let next = (i + 1..layers.len()).find(|&j| matches!(layers[j].op, LayerOp::Conv(_) | LayerOp::Fc(_)));
                if let Some(j) = next {
                    let shortcut = layers[i + 1..j]
                        .iter()
                        .any(|x| matches!(x.op, LayerOp::ResidualExit | LayerOp::ResidualEntry));
                    if !shortcut {
                        out_eff = m.input_mask(j).map_or(o, |sel| sel.nnz());
                    }
                }
                total += (oh * ow * out_eff * cin * kh * kw) as u64;
                c = o;
                h = oh;
                w = ow;
            }
            LayerOp::Fc(fc) => {
                let s = fc.weight.shape();
                total += (s[0] * s[1]) as u64;
            }
            LayerOp::MaxPool { size, stride } => {
                h = (h - size) / stride + 1;
                w = (w - size) / stride + 1;
            }
            _ => {}
        }
    }
    total
}

/// Layer of [`Net64`].
#[derive(Clone, Debug)]
pub enum Op64 {
    Conv {
        w: Vec<f64>,
        b: Vec<f64>,
        shape: [usize; 4],
        stride: usize,
        pad: usize,
        mask: Option<Vec<bool>>,
    },
    Fc {
        w: Vec<f64>,
        b: Vec<f64>,
        out: usize,
    },
    Relu,
    Pool {
        size: usize,
        stride: usize,
    },
    Entry,
    Exit,
}

/// Scalar `f64` interpreter of a masked model, written from the layer
/// definitions only.
#[derive(Clone, Debug)]
pub struct Net64 {
    pub input: [usize; 3],
    pub ops: Vec<Op64>,
}

struct Feat {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Net64 {
    pub fn from_model(m: &ModelGraph) -> Net64 {
        use pcp_core::model::LayerOp;
        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let ops = m
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| match &l.op {
                LayerOp::Conv(c) => {
                    let s = c.weight.shape();
                    Op64::Conv {
                        w: to64(c.weight.data()),
                        b: to64(&c.bias),
                        shape: [s[0], s[1], s[2], s[3]],
                        stride: c.stride,
                        pad: c.pad,
                        mask: m.input_mask(i).map(|sel| (0..sel.len()).map(|j| sel.is_kept(j)).collect()),
                    }
                }
                LayerOp::Fc(f) => Op64::Fc {
                    w: to64(f.weight.data()),
                    b: to64(&f.bias),
                    out: f.weight.shape()[0],
                },
                LayerOp::Relu => Op64::Relu,
                LayerOp::MaxPool { size, stride } => Op64::Pool {
                    size: *size,
                    stride: *stride,
                },
                LayerOp::ResidualEntry => Op64::Entry,
                LayerOp::ResidualExit => Op64::Exit,
            })
            .collect();
        Net64 {
            input: m.input_shape(),
            ops,
        }
    }

    /// Mutable parameter `coord` of `layer`, weights first, then biases.
    pub fn param_mut(&mut self, layer: usize, coord: usize) -> &mut f64 {
        match &mut self.ops[layer] {
            Op64::Conv { w, b, .. } | Op64::Fc { w, b, .. } => {
                if coord < w.len() {
                    &mut w[coord]
                } else {
                    &mut b[coord - w.len()]
                }
            }
            _ => panic!("layer {layer} has no parameters"),
        }
    }

    pub fn logits(&self, image: &[f64]) -> Vec<f64> {
        let [c, h, w] = self.input;
        let mut f = Feat { c, h, w, v: image.to_vec() };
        let mut saved = None;
        for op in &self.ops {
            f = match op {
                Op64::Conv {
                    w: wt,
                    b,
                    shape,
                    stride,
                    pad,
                    mask,
                } => {
                    let [o, i, kh, kw] = *shape;
                    let oh = (f.h + 2 * pad - kh) / stride + 1;
                    let ow = (f.w + 2 * pad - kw) / stride + 1;
                    let mut v = vec![0.0; o * oh * ow];
                    for oc in 0..o {
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut acc = b[oc];
                                for ic in 0..i {
                                    if mask.as_ref().is_some_and(|m| !m[ic]) {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (y * stride + ky) as i64 - *pad as i64;
                                            let ix = (x * stride + kx) as i64 - *pad as i64;
                                            if iy < 0 || ix < 0 || iy >= f.h as i64 || ix >= f.w as i64 {
                                                continue;
                                            }
                                            acc += wt[((oc * i + ic) * kh + ky) * kw + kx]
                                                * f.v[(ic * f.h + iy as usize) * f.w + ix as usize];
                                        }
                                    }
                                }
                                v[(oc * oh + y) * ow + x] = acc;
                            }
                        }
                    }
                    Feat { c: o, h: oh, w: ow, v }
                }
                Op64::Fc { w: wt, b, out } => {
                    let n = f.v.len();
                    let v = (0..*out)
                        .map(|o| b[o] + (0..n).map(|j| wt[o * n + j] * f.v[j]).sum::<f64>())
                        .collect();
                    Feat { c: *out, h: 1, w: 1, v }
                }
                Op64::Relu => Feat {
                    v: f.v.iter().map(|x| x.max(0.0)).collect(),
                    ..f
                },
                Op64::Pool { size, stride } => {
                    let oh = (f.h - size) / stride + 1;
                    let ow = (f.w - size) / stride + 1;
                    let mut v = Vec::with_capacity(f.c * oh * ow);
                    for ch in 0..f.c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        best = best.max(f.v[(ch * f.h + y * stride + ky) * f.w + x * stride + kx]);
                                    }
                                }
                                v.push(best);
                            }
                        }
                    }
                    Feat { c: f.c, h: oh, w: ow, v }
                }
                Op64::Entry => {
                    saved = Some(f.v.clone());
                    f
                }
                Op64::Exit => {
                    let s = saved.take().expect("entry before exit");
                    Feat {
                        v: f.v.iter().zip(&s).map(|(a, b)| a + b).collect(),
                        ..f
                    }
                }
            };
        }
        f.v
    }

    /// Mean softmax cross-entropy over a batch.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let per = x.item_len();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| {
                let image: Vec<f64> = x.data()[n * per..(n + 1) * per].iter().map(|&v| v as f64).collect();
                let z = self.logits(&image);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - z[y]
            })
            .sum();
        total / labels.len() as f64
    }
}
