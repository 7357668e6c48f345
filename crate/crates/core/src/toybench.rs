//! Synthetic image classification benchmark with a controllable domain shift,
//! plus the two small reference networks used to exercise pruning end to end.
//!
//! Class `k` draws one stroke pattern (horizontal bar, vertical bar, diagonal,
//! anti-diagonal, ring, cross) at a jittered position in a random colour, plus
//! Gaussian pixel noise. The target domain applies
//! `x' = contrast * x + brightness + background * texture(c, y, x)` to images
//! rendered from the same random stream, so source and target samples with
//! the same seed and index share their latent content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::error::{PcpError, Result};
use crate::model::{Conv2d, LayerOp, LayerSpec, Linear, ModelGraph};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub contrast: f32,
    pub brightness: f32,
    pub background: f32,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        contrast: 1.0,
        brightness: 0.0,
        background: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == DomainShift::NONE
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            contrast: 0.6,
            brightness: 0.25,
            background: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Std of additive per-pixel Gaussian noise.
    pub noise: f32,
    /// Maximum stroke offset in pixels, each axis.
    pub jitter: usize,
    /// Half-width of the per-channel colour range around 0.7.
    pub color_jitter: f32,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_classes: 4,
            image_size: 8,
            channels: 3,
            train: 512,
            val: 128,
            test: 128,
            noise: 0.45,
            jitter: 1,
            color_jitter: 0.3,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// All splits of both domains.
#[derive(Clone, Debug)]
pub struct ToyBench {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(PcpError::InvalidArgument(format!(
                "num_classes must be in [2, {MAX_CLASSES}], got {}",
                self.num_classes
            )));
        }
        if self.image_size < 6 || self.channels == 0 {
            return Err(PcpError::InvalidArgument(format!(
                "images must be at least 6x6 with one channel, got {} channels of {}x{}",
                self.channels, self.image_size, self.image_size
            )));
        }
        if 2 * self.jitter + 4 > self.image_size {
            return Err(PcpError::InvalidArgument(format!(
                "jitter {} does not fit a {}-pixel image",
                self.jitter, self.image_size
            )));
        }
        if !(self.noise >= 0.0) || !(self.color_jitter >= 0.0) {
            return Err(PcpError::InvalidArgument("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// One split of one domain. Labels cycle through the classes in a
    /// seed-shuffled order so every split is class balanced.
    pub fn generate(&self, domain: Domain, split: Split) -> Result<Dataset> {
        self.validate()?;
        let shift = match domain {
            Domain::Source => DomainShift::NONE,
            Domain::Target => self.shift,
            Domain::Mixed => {
                return Err(PcpError::InvalidArgument(
                    "the generator renders source or target images only".into(),
                ))
            }
        };
        let n = self.split_len(split);
        let (c, s) = (self.channels, self.image_size);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split.stream());
        let noise = Normal::new(0.0f32, self.noise.max(0.0)).map_err(|e| PcpError::InvalidArgument(e.to_string()))?;
        let mut images = Vec::with_capacity(n * c * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.num_classes;
            let j = self.jitter as i64;
            let dy = rng.random_range(-j..=j);
            let dx = rng.random_range(-j..=j);
            let colour: Vec<f32> = (0..c)
                .map(|_| 0.7 + self.color_jitter * (2.0 * rng.random::<f32>() - 1.0))
                .collect();
            for (ch, &col) in colour.iter().enumerate() {
                for y in 0..s {
                    for x in 0..s {
                        let p = pattern(label, s, y as i64 - dy, x as i64 - dx);
                        let mut v = col * p;
                        if self.noise > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        images.push(apply_shift(&shift, v, ch, y, x));
                    }
                }
            }
            labels.push(label);
        }
        let name = format!("toy-{}-{}", domain_name(domain), split.as_str());
        let images = Tensor::new(vec![n, c, s, s], images)?;
        let ds = Dataset::new(name, domain, self.num_classes, images, Some(labels))?;
        shuffle_balanced(ds, &mut rng)
    }

    pub fn generate_all(&self) -> Result<ToyBench> {
        Ok(ToyBench {
            source_train: self.generate(Domain::Source, Split::Train)?,
            source_val: self.generate(Domain::Source, Split::Val)?,
            source_test: self.generate(Domain::Source, Split::Test)?,
            target_train: self.generate(Domain::Target, Split::Train)?,
            target_val: self.generate(Domain::Target, Split::Val)?,
            target_test: self.generate(Domain::Target, Split::Test)?,
        })
    }
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
        Domain::Mixed => "mixed",
    }
}

/// Deterministic permutation drawn after all pixels, so the image stream is
/// identical across domains.
fn shuffle_balanced(ds: Dataset, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    ds.subset(&order)
}

/// Stroke intensity in `[0, 1]` at `(y, x)` of the unshifted pattern.
fn pattern(label: usize, size: usize, y: i64, x: i64) -> f32 {
    let s = size as i64;
    if y < 0 || x < 0 || y >= s || x >= s {
        return 0.0;
    }
    let mid = s / 2;
    let lo = 1;
    let hi = s - 2;
    let inside = |v: i64| (lo..=hi).contains(&v);
    let on = match label {
        0 => (y == mid - 1 || y == mid) && inside(x),
        1 => (x == mid - 1 || x == mid) && inside(y),
        2 => (y - x).abs() <= 0 && inside(x) && inside(y),
        3 => (y + x - (s - 1)).abs() <= 0 && inside(x) && inside(y),
        4 => {
            let ring_lo = mid - 2;
            let ring_hi = mid + 1;
            let in_box = (ring_lo..=ring_hi).contains(&y) && (ring_lo..=ring_hi).contains(&x);
            in_box && (y == ring_lo || y == ring_hi || x == ring_lo || x == ring_hi)
        }
        _ => (y == mid && inside(x)) || (x == mid && inside(y)),
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Fixed striped texture in `[0, 1]`.
fn texture(ch: usize, y: usize, x: usize) -> f32 {
    ((y + 2 * x + ch) % 4) as f32 / 3.0
}

fn apply_shift(shift: &DomainShift, v: f32, ch: usize, y: usize, x: usize) -> f32 {
    if shift.is_identity() {
        return v;
    }
    shift.contrast * v + shift.brightness + shift.background * texture(ch, y, x)
}

/// Photometric augmentation `x' = a * x + b` with `a` and `b` drawn per image
/// from the given ranges. Uses no knowledge of any target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    /// Augmented copies appended after the original samples.
    pub copies: usize,
    pub contrast: (f32, f32),
    pub brightness: (f32, f32),
    pub seed: u64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            copies: 1,
            contrast: (0.5, 1.0),
            brightness: (0.0, 0.4),
            seed: 0,
        }
    }
}

impl Augmentation {
    /// The original labelled samples followed by `copies` augmented copies.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let ranges_ok = |(lo, hi): (f32, f32)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ranges_ok(self.contrast) || !ranges_ok(self.brightness) {
            return Err(PcpError::InvalidArgument(format!(
                "augmentation ranges must be finite and ordered, got {:?} and {:?}",
                self.contrast, self.brightness
            )));
        }
        let labels = ds.labels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| lo + (hi - lo) * rng.random::<f32>();
        let mut parts = vec![ds.images.clone()];
        let mut all_labels = labels.to_vec();
        for _ in 0..self.copies {
            let mut images = ds.images.clone();
            let per = images.item_len().max(1);
            for item in images.data_mut().chunks_mut(per) {
                let a = draw(&mut rng, self.contrast);
                let b = draw(&mut rng, self.brightness);
                item.iter_mut().for_each(|v| *v = a * *v + b);
            }
            parts.push(images);
            all_labels.extend_from_slice(labels);
        }
        let images = Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())?;
        Dataset::new(format!("{}-aug", ds.name), ds.domain, ds.num_classes, images, Some(all_labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Four 3x3 convolutions in two pooled stages, then a linear classifier.
    TinyVgg,
    /// Two 3x3 convolutions, then a bottleneck residual block with an
    /// identity shortcut, then a linear classifier.
    TinyRes,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::TinyVgg => "tiny-vgg",
            Architecture::TinyRes => "tiny-res",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = PcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-vgg" => Ok(Architecture::TinyVgg),
            "tiny-res" => Ok(Architecture::TinyRes),
            other => Err(PcpError::InvalidArgument(format!(
                "unknown architecture {other:?}, expected tiny-vgg or tiny-res"
            ))),
        }
    }
}

fn he_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Conv2d {
    let std = (2.0 / (inp * k * k) as f32).sqrt();
    Conv2d {
        weight: Tensor::randn(&[out, inp, k, k], std, rng),
        bias: vec![0.0; out],
        stride: 1,
        pad: k / 2,
    }
}

fn he_fc(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear {
    let std = (1.0 / inp as f32).sqrt();
    Linear {
        weight: Tensor::randn(&[out, inp], std, rng),
        bias: vec![0.0; out],
    }
}

/// Freshly initialised reference network for `[channels, size, size]` inputs.
/// `size` must be divisible by 4.
pub fn build_reference_model(
    arch: Architecture,
    channels: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if size % 4 != 0 || size == 0 {
        return Err(PcpError::InvalidArgument(format!(
            "reference models need an image size divisible by 4, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = || LayerSpec::new(LayerOp::MaxPool { size: 2, stride: 2 });
    let relu = || LayerSpec::new(LayerOp::Relu);
    let q = size / 4;
    let layers = match arch {
        Architecture::TinyVgg => vec![
            LayerSpec::new(LayerOp::Conv(he_conv(&mut rng, 16, channels, 3))),
            relu(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 16, 16, 3))),
            relu(),
            pool(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 32, 16, 3))),
            relu(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 32, 32, 3))),
            relu(),
            pool(),
            LayerSpec::new(LayerOp::Fc(he_fc(&mut rng, num_classes, 32 * q * q))),
        ],
        Architecture::TinyRes => vec![
            LayerSpec::new(LayerOp::Conv(he_conv(&mut rng, 16, channels, 3))),
            relu(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 16, 16, 3))),
            relu(),
            pool(),
            LayerSpec::new(LayerOp::ResidualEntry),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 16, 16, 1))),
            relu(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 16, 16, 3))),
            relu(),
            LayerSpec::prunable(LayerOp::Conv(he_conv(&mut rng, 16, 16, 1))),
            LayerSpec::new(LayerOp::ResidualExit),
            relu(),
            pool(),
            LayerSpec::new(LayerOp::Fc(he_fc(&mut rng, num_classes, 16 * q * q))),
        ],
    };
    ModelGraph::new(arch.as_str(), [channels, size, size], layers)
}
