//! Pseudo-labelling of an unlabelled target domain and construction of the
//! mixed source + pseudo-labelled target sets that steer pruning under
//! domain shift.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, SampleOrigin};
use crate::error::{PcpError, Result};
use crate::model::forward::argmax;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    pub threshold: f64,
    /// Indices into the target dataset, ascending.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Max softmax probability of each retained sample.
    pub confidences: Vec<f64>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The subset at or above a stricter threshold.
    pub fn filter(&self, threshold: f64) -> PseudoLabeledSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.confidences[i] >= threshold).collect();
        PseudoLabeledSet {
            threshold,
            indices: keep.iter().map(|&i| self.indices[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            confidences: keep.iter().map(|&i| self.confidences[i]).collect(),
        }
    }
}

/// Softmax probabilities of one logit row, accumulated in `f64`.
pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exp: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Labels every target sample whose top softmax probability reaches
/// `threshold` with its argmax class. Existing labels are ignored.
pub fn pseudo_label(model: &ModelGraph, target: &Dataset, threshold: f64) -> Result<PseudoLabeledSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PcpError::InvalidArgument(format!(
            "confidence threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let logits = model.logits(&target.images)?;
    let k = logits.item_len();
    if k != target.num_classes {
        return Err(PcpError::Shape(format!(
            "model predicts {k} classes, dataset declares {}",
            target.num_classes
        )));
    }
    let mut out = PseudoLabeledSet {
        threshold,
        ..Default::default()
    };
    for (i, row) in logits.data().chunks(k).enumerate() {
        let label = argmax(row);
        let confidence = softmax(row)[label];
        if confidence >= threshold {
            out.indices.push(i);
            out.labels.push(label);
            out.confidences.push(confidence);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Fraction of each output set drawn from pseudo-labelled target samples.
    pub target_share: f64,
    /// Fraction of each pool reserved for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            target_share: 0.5,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_share) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PcpError::InvalidArgument(format!(
                "target_share must lie in [0, 1] and val_fraction in [0, 1), got {} and {}",
                self.target_share, self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Largest `(n_source, n_target)` with `n_target / (n_source + n_target)`
/// equal to `share` (up to rounding down) within the available counts.
fn mix_counts(avail_s: usize, avail_t: usize, share: f64) -> (usize, usize) {
    if avail_t == 0 || share == 0.0 {
        return (avail_s, 0);
    }
    if avail_s == 0 || share == 1.0 {
        return (0, avail_t);
    }
    let t_for_all_s = (share / (1.0 - share) * avail_s as f64 + 1e-9).floor() as usize;
    if t_for_all_s <= avail_t {
        (avail_s, t_for_all_s)
    } else {
        let s_for_all_t = ((1.0 - share) / share * avail_t as f64 + 1e-9).floor() as usize;
        (s_for_all_t.min(avail_s), avail_t)
    }
}

struct Pools {
    calib: Vec<SampleOrigin>,
    val: Vec<SampleOrigin>,
}

fn split_pool(mut items: Vec<SampleOrigin>, val_fraction: f64, rng: &mut ChaCha8Rng) -> Pools {
    items.shuffle(rng);
    let n_val = (val_fraction * items.len() as f64).round() as usize;
    let calib = items.split_off(n_val);
    Pools { calib, val: items }
}

fn materialise(
    name: &str,
    source: &Dataset,
    target: &Dataset,
    pseudo: &PseudoLabeledSet,
    origins: Vec<SampleOrigin>,
) -> Result<Dataset> {
    let src_labels = source.labels()?;
    let mut parts = Vec::with_capacity(origins.len());
    let mut labels = Vec::with_capacity(origins.len());
    for o in &origins {
        let (ds, label) = match o.domain {
            Domain::Source => (source, src_labels[o.index]),
            _ => {
                let at = pseudo.indices.binary_search(&o.index).expect("pseudo index");
                (target, pseudo.labels[at])
            }
        };
        parts.push(ds.images.batch_range(o.index, o.index + 1)?);
        labels.push(label);
    }
    let images = if parts.is_empty() {
        let [c, h, w] = [source.images.shape()[1], source.images.shape()[2], source.images.shape()[3]];
        Tensor::zeros(&[0, c, h, w])
    } else {
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())?
    };
    let domain = if origins.iter().any(|o| o.domain != Domain::Source) {
        Domain::Mixed
    } else {
        Domain::Source
    };
    Dataset::new(name, domain, source.num_classes, images, Some(labels))?.with_origins(origins)
}

/// Calibration and validation sets mixing labelled source samples with
/// pseudo-labelled target samples at `cfg.target_share`. The two sets are
/// disjoint. With an empty pseudo set this is exactly [`split_source`].
pub fn build_mixed_sets(
    source: &Dataset,
    pseudo: &PseudoLabeledSet,
    target: &Dataset,
    cfg: &MixConfig,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    source.labels()?;
    if source.is_empty() && pseudo.is_empty() {
        return Err(PcpError::InvalidArgument(
            "cannot build calibration sets from no source and no pseudo-labelled samples".into(),
        ));
    }
    if pseudo.indices.windows(2).any(|w| w[0] >= w[1]) || pseudo.indices.last().is_some_and(|&i| i >= target.len()) {
        return Err(PcpError::InvalidArgument("pseudo-label indices must be ascending and within the target set".into()));
    }
    if pseudo.labels.len() != pseudo.len() || pseudo.confidences.len() != pseudo.len() {
        return Err(PcpError::Shape("pseudo-label vectors differ in length".into()));
    }
    if !pseudo.is_empty() && source.images.shape()[1..] != target.images.shape()[1..] {
        return Err(PcpError::Shape(format!(
            "source images {:?} and target images {:?} differ",
            source.images.shape(),
            target.images.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src: Vec<SampleOrigin> = (0..source.len())
        .map(|index| SampleOrigin {
            domain: Domain::Source,
            index,
            pseudo_labeled: false,
        })
        .collect();
    let tgt: Vec<SampleOrigin> = pseudo
        .indices
        .iter()
        .map(|&index| SampleOrigin {
            domain: Domain::Target,
            index,
            pseudo_labeled: true,
        })
        .collect();
    let src = split_pool(src, cfg.val_fraction, &mut rng);
    // The target pool draws from its own stream so source-only runs do not
    // depend on it.
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    tgt_rng.set_stream(1);
    let tgt = split_pool(tgt, cfg.val_fraction, &mut tgt_rng);

    let assemble = |s: Vec<SampleOrigin>, t: Vec<SampleOrigin>, rng: &mut ChaCha8Rng| {
        let (ns, nt) = mix_counts(s.len(), t.len(), cfg.target_share);
        let mut all: Vec<SampleOrigin> = s.into_iter().take(ns).chain(t.into_iter().take(nt)).collect();
        if nt > 0 {
            all.shuffle(rng);
        }
        all
    };
    let calib = assemble(src.calib, tgt.calib, &mut tgt_rng);
    let val = assemble(src.val, tgt.val, &mut tgt_rng);
    if calib.is_empty() || val.is_empty() {
        return Err(PcpError::InvalidArgument(format!(
            "mix produced {} calibration and {} validation samples",
            calib.len(),
            val.len()
        )));
    }
    Ok((
        materialise(&format!("{}-calib", source.name), source, target, pseudo, calib)?,
        materialise(&format!("{}-val", source.name), source, target, pseudo, val)?,
    ))
}

/// The supervised split: source samples only.
pub fn split_source(source: &Dataset, cfg: &MixConfig) -> Result<(Dataset, Dataset)> {
    let empty = PseudoLabeledSet::default();
    build_mixed_sets(source, &empty, source, cfg)
}
