//! The progressive loop: attempt every prunable layer, keep the `top_n` that
//! lose the least validation accuracy, prune those for real shallow to deep,
//! and repeat until the FLOPs compression ratio reaches the target.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PcpError, Result};
use crate::model::{compression_ratio, ModelGraph};
use crate::prune::{attempt_prune, prune_committed, Attempt, LayerPruneConfig};
use crate::sampler::ReferenceFeatures;
use crate::tensor::Tensor;

pub const RUN_LOG_FILE: &str = "run_log.json";

/// How many channels a layer loses per iteration, as a function of its
/// current width and the compression ratio reached so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FSchedule {
    pub early_fraction: f64,
    pub late_fraction: f64,
    pub cap: usize,
    /// Below this ratio the early regime applies.
    pub early_breakpoint: f64,
    /// At or above this ratio the late regime applies.
    pub late_breakpoint: f64,
}

impl Default for FSchedule {
    fn default() -> Self {
        FSchedule {
            early_fraction: 0.3,
            late_fraction: 0.1,
            cap: 40,
            early_breakpoint: 2.0,
            late_breakpoint: 5.0,
        }
    }
}

impl FSchedule {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.early_fraction) || !frac_ok(self.late_fraction) {
            return Err(PcpError::InvalidArgument(format!(
                "schedule fractions must lie in (0, 1], got {} and {}",
                self.early_fraction, self.late_fraction
            )));
        }
        if !(self.early_breakpoint <= self.late_breakpoint) {
            return Err(PcpError::InvalidArgument(format!(
                "schedule breakpoints must be ordered, got {} and {}",
                self.early_breakpoint, self.late_breakpoint
            )));
        }
        Ok(())
    }
}

/// Channels to remove from a layer with `nnz` kept channels at ratio `ratio`.
///
/// Early: `max(ceil(early * nnz), cap)`. Late: `min(ceil(late * nnz), cap)`.
/// In between, `ceil(frac * nnz)` with the fraction interpolated linearly in
/// the ratio. Always within `[1, nnz - 1]`.
pub fn schedule_f(nnz: usize, ratio: f64, s: &FSchedule) -> usize {
    if nnz < 2 {
        return 0;
    }
    let ceil_frac = |f: f64| (f * nnz as f64 - 1e-9).ceil().max(0.0) as usize;
    let raw = if ratio < s.early_breakpoint {
        ceil_frac(s.early_fraction).max(s.cap)
    } else if ratio >= s.late_breakpoint {
        ceil_frac(s.late_fraction).min(s.cap)
    } else {
        let t = (ratio - s.early_breakpoint) / (s.late_breakpoint - s.early_breakpoint);
        ceil_frac(s.early_fraction + t * (s.late_fraction - s.early_fraction))
    };
    raw.clamp(1, nnz - 1)
}

/// The `top_n` layers with the highest accuracy (lower index on ties),
/// returned in ascending layer order.
pub fn select_top_n(acc: &BTreeMap<usize, f64>, top_n: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = acc.iter().map(|(&l, &a)| (l, a)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = ranked.into_iter().take(top_n).map(|(l, _)| l).collect();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub target_ratio: f64,
    pub top_n: usize,
    pub schedule: FSchedule,
    #[serde(flatten)]
    pub layer: LayerPruneConfig,
    pub max_iterations: usize,
    /// Worker threads for the attempting step; 0 picks one per prunable
    /// layer, capped at the available parallelism.
    pub jobs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target_ratio: 2.0,
            top_n: 2,
            schedule: FSchedule::default(),
            layer: LayerPruneConfig::default(),
            max_iterations: 100,
            jobs: 0,
            checkpoint_dir: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if !(self.target_ratio.is_finite() && self.target_ratio >= 1.0) {
            return Err(PcpError::InvalidArgument(format!(
                "target ratio must be at least 1, got {}",
                self.target_ratio
            )));
        }
        let prunable = model.prunable_layers().len();
        if self.top_n == 0 || self.top_n > prunable {
            return Err(PcpError::InvalidArgument(format!(
                "top_n must be between 1 and the {prunable} prunable layers, got {}",
                self.top_n
            )));
        }
        if self.max_iterations == 0 {
            return Err(PcpError::InvalidArgument("max_iterations must be positive".into()));
        }
        self.schedule.validate()?;
        self.layer.sampler.validate()?;
        self.layer.ramp.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// Validation accuracy of the model entering this iteration.
    pub baseline_accuracy: f64,
    /// Layer -> validation accuracy of its trial pruning.
    pub accuracies: BTreeMap<usize, f64>,
    /// Layer -> channels removed in its trial (and commit, if selected).
    pub channels_removed: BTreeMap<usize, usize>,
    pub selected: Vec<usize>,
    pub ratio: f64,
    pub flops: u64,
    /// Layer -> kept input channels after this iteration.
    pub kept_channels: BTreeMap<usize, usize>,
    /// Layer -> kept channels as a percentage of the original width.
    pub remained_percent: BTreeMap<usize, f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct PcpRun {
    pub initial_flops: u64,
    pub initial_ratio: f64,
    /// `M_1, M_2, ...`
    pub models: Vec<ModelGraph>,
    pub records: Vec<IterationRecord>,
}

impl PcpRun {
    pub fn final_model(&self) -> Option<&ModelGraph> {
        self.models.last()
    }

    pub fn final_ratio(&self) -> f64 {
        self.records.last().map_or(self.initial_ratio, |r| r.ratio)
    }
}

/// A run that stopped early, with everything completed so far.
#[derive(Debug)]
pub struct RunFailure {
    pub error: PcpError,
    pub partial: PcpRun,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} iterations completed)", self.error, self.partial.records.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<RunFailure> for PcpError {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

#[derive(Serialize)]
struct RunLog<'a> {
    config: &'a PruneConfig,
    model: &'a str,
    initial_flops: u64,
    initial_ratio: f64,
    records: &'a [IterationRecord],
}

fn write_run_log(dir: &Path, cfg: &PruneConfig, model: &str, run: &PcpRun) -> Result<()> {
    let log = RunLog {
        config: cfg,
        model,
        initial_flops: run.initial_flops,
        initial_ratio: run.initial_ratio,
        records: &run.records,
    };
    let path = dir.join(RUN_LOG_FILE);
    let json = serde_json::to_string_pretty(&log).map_err(|e| PcpError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| PcpError::io(&path, e))
}

pub fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("iteration_{t}"))
}

/// Kept channels per prunable layer, from its selection or sampler.
pub fn kept_channels(model: &ModelGraph) -> BTreeMap<usize, usize> {
    model
        .prunable_layers()
        .into_iter()
        .filter_map(|l| model.input_mask(l).map(|m| (l, m.nnz())))
        .collect()
}

/// Kept channels as a percentage of each layer's original width.
pub fn remained_percent(model: &ModelGraph) -> BTreeMap<usize, f64> {
    model
        .prunable_layers()
        .into_iter()
        .filter_map(|l| model.input_mask(l).map(|m| (l, 100.0 * m.nnz() as f64 / m.len() as f64)))
        .collect()
}

fn attempt_all(
    state: &ModelGraph,
    reference: &ReferenceFeatures,
    plan: &[(usize, usize)],
    calib: &Tensor,
    val: &Dataset,
    cfg: &PruneConfig,
) -> Result<Vec<Attempt>> {
    let jobs = match cfg.jobs {
        0 => plan.len().min(std::thread::available_parallelism().map_or(1, |n| n.get())),
        j => j,
    }
    .max(1);
    let run = || {
        plan.par_iter()
            .map(|&(l, f)| attempt_prune(state, reference, l, f, calib, val, &cfg.layer))
            .collect::<Result<Vec<_>>>()
    };
    if jobs == 1 {
        return plan
            .iter()
            .map(|&(l, f)| attempt_prune(state, reference, l, f, calib, val, &cfg.layer))
            .collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PcpError::InvalidArgument(format!("worker pool: {e}")))?
        .install(run)
}

/// Runs the attempt-select-prune loop from `model` until the compression
/// ratio reaches `cfg.target_ratio`. Checkpoints and `run_log.json` are
/// written after every iteration when `cfg.checkpoint_dir` is set.
pub fn run_pcp(
    model: &ModelGraph,
    cfg: &PruneConfig,
    calib: &Tensor,
    val: &Dataset,
) -> std::result::Result<PcpRun, RunFailure> {
    let mut run = PcpRun {
        initial_flops: 0,
        initial_ratio: 1.0,
        models: Vec::new(),
        records: Vec::new(),
    };
    let fail = |error: PcpError, partial: PcpRun| RunFailure { error, partial };
    let setup = (|| -> Result<(u64, ReferenceFeatures)> {
        cfg.validate(model)?;
        if model.is_compact() {
            return Err(PcpError::Precondition("cannot prune a compacted model".into()));
        }
        val.labels()?;
        let flops = model.flops()?;
        let reference = ReferenceFeatures::compute(model, calib)?;
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| PcpError::io(dir, e))?;
        }
        Ok((flops, reference))
    })();
    let (initial_flops, reference) = match setup {
        Ok(v) => v,
        Err(e) => return Err(fail(e, run)),
    };
    run.initial_flops = initial_flops;
    if let Some(dir) = &cfg.checkpoint_dir {
        if let Err(e) = write_run_log(dir, cfg, &model.name, &run) {
            return Err(fail(e, run));
        }
    }
    let mut state = model.clone();
    let mut ratio = 1.0;
    let mut t = 0;
    while ratio < cfg.target_ratio {
        if t >= cfg.max_iterations {
            let error = PcpError::IterationLimit {
                limit: cfg.max_iterations,
                ratio,
            };
            return Err(fail(error, run));
        }
        t += 1;
        match iterate(&state, model, &reference, t, ratio, cfg, calib, val) {
            Ok((next, record)) => {
                info!(
                    "iteration {t}: selected {:?}, ratio {:.3}, flops {}",
                    record.selected, record.ratio, record.flops
                );
                ratio = record.ratio;
                state = next.clone();
                run.models.push(next);
                run.records.push(record);
                if let Some(dir) = &cfg.checkpoint_dir {
                    if let Err(e) = write_run_log(dir, cfg, &model.name, &run) {
                        return Err(fail(e, run));
                    }
                }
            }
            Err(e) => return Err(fail(e, run)),
        }
    }
    Ok(run)
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    state: &ModelGraph,
    original: &ModelGraph,
    reference: &ReferenceFeatures,
    t: usize,
    ratio: f64,
    cfg: &PruneConfig,
    calib: &Tensor,
    val: &Dataset,
) -> Result<(ModelGraph, IterationRecord)> {
    let started = Instant::now();
    let plan: Vec<(usize, usize)> = kept_channels(state)
        .into_iter()
        .filter(|&(_, nnz)| nnz >= 2)
        .map(|(l, nnz)| (l, schedule_f(nnz, ratio, &cfg.schedule)))
        .collect();
    if plan.is_empty() {
        return Err(PcpError::NoProgress {
            iterations: t - 1,
            ratio,
        });
    }
    let baseline_accuracy = state.accuracy(&val.images, val.labels()?)?;
    let attempts = attempt_all(state, reference, &plan, calib, val, cfg)?;
    let accuracies: BTreeMap<usize, f64> = attempts.iter().map(|a| (a.layer, a.accuracy)).collect();
    let channels_removed: BTreeMap<usize, usize> = plan.iter().copied().collect();
    let selected = select_top_n(&accuracies, cfg.top_n);
    let (mut next, _) = prune_committed(state, reference, &selected, &channels_removed, calib, &cfg.layer)?;
    next.iteration = t;
    let flops = next.flops()?;
    let ratio = compression_ratio(original, &next)?;
    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            let path = checkpoint_path(dir, t);
            next.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let record = IterationRecord {
        t,
        baseline_accuracy,
        accuracies,
        channels_removed,
        selected,
        ratio,
        flops,
        kept_channels: kept_channels(&next),
        remained_percent: remained_percent(&next),
        checkpoint,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((next, record))
}

/// Single-shot baseline: every prunable layer keeps the same fraction of its
/// channels, chosen as the largest fraction whose compression ratio reaches
/// `target_ratio`, then all layers are pruned shallow to deep with the same
/// solvers as the progressive loop.
pub fn one_shot_uniform(
    model: &ModelGraph,
    target_ratio: f64,
    calib: &Tensor,
    cfg: &LayerPruneConfig,
) -> Result<ModelGraph> {
    const GRID: usize = 256;
    let widths = kept_channels(model);
    let mut plan: Option<BTreeMap<usize, usize>> = None;
    for step in (1..GRID).rev() {
        let keep_frac = step as f64 / GRID as f64;
        let removals: BTreeMap<usize, usize> = widths
            .iter()
            .map(|(&l, &c)| {
                let keep = ((keep_frac * c as f64).round() as usize).clamp(1, c);
                (l, c - keep)
            })
            .collect();
        let mut probe = model.clone();
        for (&l, &f) in &removals {
            if f > 0 {
                let mask = probe.input_mask(l).expect("prunable").clone();
                let kept: Vec<usize> = mask.kept().into_iter().take(mask.nnz() - f).collect();
                let sel = crate::model::ChannelSelection::from_kept(mask.len(), &kept)?;
                let w = probe.conv(l)?.weight.clone();
                probe = probe.apply_selection(l, &sel, w)?;
            }
        }
        if compression_ratio(model, &probe)? >= target_ratio {
            plan = Some(removals);
            break;
        }
    }
    let removals = plan.ok_or_else(|| {
        PcpError::InvalidArgument(format!("uniform pruning cannot reach ratio {target_ratio}"))
    })?;
    let layers: Vec<usize> = removals.iter().filter(|(_, &f)| f > 0).map(|(&l, _)| l).collect();
    let reference = ReferenceFeatures::compute(model, calib)?;
    let (pruned, _) = prune_committed(model, &reference, &layers, &removals, calib, cfg)?;
    Ok(pruned)
}
