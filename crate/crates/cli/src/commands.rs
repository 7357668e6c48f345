use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::info;
use pcp_core::data::Dataset;
use pcp_core::finetune::{sgd_finetune, write_train_log, EpochLog, TRAIN_LOG_FILE};
use pcp_core::model::ModelGraph;
use pcp_core::pcp::{run_pcp, PcpRun};
use pcp_core::toybench::build_reference_model;
use pcp_core::transfer::{build_mixed_sets, pseudo_label as label_confident, PseudoLabeledSet};
use serde::Serialize;
use serde_json::json;

use crate::config::{CliConfig, RESOLVED_CONFIG_FILE};
use crate::error::{config_error, CliError, CliResult, Classify};
use crate::report;
use crate::{EvalArgs, FinetuneArgs, GenerateArgs, InspectArgs, PruneArgs, PseudoLabelArgs, TrainArgs, TrainingArgs};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const REPORT_FILE: &str = "report.txt";
/// Dataset directories written by `generate`.
pub const SPLITS: [&str; 6] = [
    "source_train",
    "source_val",
    "source_test",
    "target_train",
    "target_val",
    "target_test",
];

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub json: bool,
}

impl Context {
    fn emit<T: Serialize>(&self, text: &str, doc: &T) -> CliResult<()> {
        if self.json {
            let s = serde_json::to_string_pretty(doc).or_runtime(|| "cannot serialize output".into())?;
            println!("{s}");
        } else {
            print!("{text}");
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_path: Option<String>,
    resolved_config: &'a CliConfig,
    out: String,
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
    status: &'a str,
}

fn write_provenance(
    ctx: &Context,
    command: &str,
    cfg: &CliConfig,
    out: &Path,
    started: DateTime<Utc>,
    status: &str,
) -> CliResult<()> {
    fs::create_dir_all(out).or_runtime(|| format!("cannot create {}", out.display()))?;
    let toml = cfg.to_toml().map_err(CliError::Runtime)?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, toml).or_runtime(|| format!("cannot write {}", path.display()))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_path: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        resolved_config: cfg,
        out: out.display().to_string(),
        started,
        finished: Utc::now(),
        status,
    };
    let path = out.join(RUN_MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).or_runtime(|| "cannot serialize run manifest".into())?;
    fs::write(&path, json).or_runtime(|| format!("cannot write {}", path.display()))
}

fn load_model(path: &Path) -> CliResult<ModelGraph> {
    ModelGraph::load(path).or_config(|| format!("cannot load model {}", path.display()))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::load(path).or_config(|| format!("cannot load dataset {}", path.display()))
}

fn load_labelled(path: &Path) -> CliResult<Dataset> {
    let ds = load_dataset(path)?;
    if ds.labels.is_none() {
        return Err(config_error(format!("dataset {} has no labels", path.display())));
    }
    Ok(ds)
}

fn check_input(model: &ModelGraph, ds: &Dataset, path: &Path) -> CliResult<()> {
    let [c, h, w] = model.input_shape();
    let shape = ds.images.shape();
    if shape[1..] != [c, h, w] || ds.num_classes != model.num_classes() {
        return Err(config_error(format!(
            "dataset {} has images {:?} and {} classes, the model expects [{c}, {h}, {w}] and {} classes",
            path.display(),
            &shape[1..],
            ds.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

pub fn generate(ctx: &Context, mut cfg: CliConfig, a: GenerateArgs) -> CliResult<()> {
    let started = Utc::now();
    let g = &mut cfg.generate;
    if let Some(v) = a.seed {
        g.seed = v;
    }
    if let Some(v) = a.noise {
        g.noise = v;
    }
    if let Some(v) = a.train {
        g.train = v;
    }
    if let Some(v) = a.val {
        g.val = v;
    }
    if let Some(v) = a.test {
        g.test = v;
    }
    let bench = cfg.generate.generate_all().or_config(|| "invalid generator settings".into())?;
    let sets = [
        &bench.source_train,
        &bench.source_val,
        &bench.source_test,
        &bench.target_train,
        &bench.target_val,
        &bench.target_test,
    ];
    let mut rows = Vec::new();
    let mut text = String::new();
    for (name, ds) in SPLITS.iter().zip(sets) {
        let dir = a.out.join(name);
        ds.save(&dir).or_runtime(|| format!("cannot write dataset {}", dir.display()))?;
        text.push_str(&format!("{:<13} {:>6} samples -> {}\n", name, ds.len(), dir.display()));
        rows.push(json!({
            "name": name,
            "domain": ds.domain,
            "samples": ds.len(),
            "num_classes": ds.num_classes,
            "shape": &ds.images.shape()[1..],
            "path": dir.display().to_string(),
        }));
    }
    write_provenance(ctx, "generate", &cfg, &a.out, started, "ok")?;
    ctx.emit(
        &text,
        &json!({ "out": a.out.display().to_string(), "seed": cfg.generate.seed, "datasets": rows }),
    )
}

fn apply_training(cfg: &mut CliConfig, t: &TrainingArgs) {
    let c = &mut cfg.train;
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.lr {
        c.learning_rate = v;
    }
    if let Some(v) = t.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = t.seed {
        c.seed = v;
    }
}

fn fit(
    ctx: &Context,
    command: &str,
    cfg: &CliConfig,
    model: &ModelGraph,
    train: &Dataset,
    t: &TrainingArgs,
) -> CliResult<()> {
    let started = Utc::now();
    cfg.train.validate().or_config(|| "invalid training settings".into())?;
    check_input(model, train, &t.data)?;
    let val = match &t.val {
        Some(p) => {
            let v = load_labelled(p)?;
            check_input(model, &v, p)?;
            Some(v)
        }
        None => None,
    };
    info!("{command}: {} samples, {} epochs", train.len(), cfg.train.epochs);
    let (trained, log) = sgd_finetune(model, train, val.as_ref(), &cfg.train).or_runtime(|| format!("{command} failed"))?;
    trained.save(&t.out).or_runtime(|| format!("cannot save model to {}", t.out.display()))?;
    let log_path = t.out.join(TRAIN_LOG_FILE);
    write_train_log(&log_path, &log).or_runtime(|| format!("cannot write {}", log_path.display()))?;
    write_provenance(ctx, command, cfg, &t.out, started, "ok")?;
    let last: Option<&EpochLog> = log.last();
    let mut text = String::new();
    for e in &log {
        let acc = e.val_accuracy.map_or_else(String::new, |a| format!(", val accuracy {:.2}%", 100.0 * a));
        text.push_str(&format!("epoch {:>3}: loss {:.5}{acc}\n", e.epoch, e.loss));
    }
    text.push_str(&format!("model saved to {}\n", t.out.display()));
    ctx.emit(
        &text,
        &json!({
            "model": t.out.display().to_string(),
            "samples": train.len(),
            "flops": trained.flops().or_runtime(|| "cannot count FLOPs".into())?,
            "epochs": log,
            "final_loss": last.map(|e| e.loss),
            "val_accuracy": last.and_then(|e| e.val_accuracy),
        }),
    )
}

pub fn train(ctx: &Context, mut cfg: CliConfig, a: TrainArgs) -> CliResult<()> {
    apply_training(&mut cfg, &a.training);
    let mut data = load_labelled(&a.training.data)?;
    if a.augment {
        data = cfg.augment.apply(&data).or_config(|| "invalid augmentation settings".into())?;
    }
    let shape = data.images.shape();
    if shape[2] != shape[3] {
        return Err(config_error(format!("dataset {} has non-square images", a.training.data.display())));
    }
    let model = build_reference_model(a.arch, shape[1], shape[2], data.num_classes, cfg.train.seed)
        .or_config(|| format!("cannot build a {} for {}", a.arch.as_str(), a.training.data.display()))?;
    fit(ctx, "train", &cfg, &model, &data, &a.training)
}

pub fn finetune(ctx: &Context, mut cfg: CliConfig, a: FinetuneArgs) -> CliResult<()> {
    apply_training(&mut cfg, &a.training);
    let model = load_model(&a.model)?;
    let data = load_labelled(&a.training.data)?;
    fit(ctx, "finetune", &cfg, &model, &data, &a.training)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let data = load_labelled(&a.data)?;
    check_input(&model, &data, &a.data)?;
    let labels = data.labels().or_config(|| format!("dataset {} has no labels", a.data.display()))?;
    let preds = model.predict(&data.images).or_runtime(|| "evaluation failed".into())?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let accuracy = if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 };
    let flops = model.flops().or_runtime(|| "cannot count FLOPs".into())?;
    let text = format!(
        "accuracy {:.2}% ({correct}/{}), FLOPs {flops}\n",
        100.0 * accuracy,
        data.len()
    );
    ctx.emit(
        &text,
        &json!({
            "model": a.model.display().to_string(),
            "data": a.data.display().to_string(),
            "samples": data.len(),
            "correct": correct,
            "accuracy": accuracy,
            "flops": flops,
        }),
    )
}

pub fn pseudo_label(ctx: &Context, cfg: CliConfig, a: PseudoLabelArgs) -> CliResult<()> {
    let threshold = a.threshold.unwrap_or(cfg.pseudo.threshold);
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    check_input(&model, &data, &a.data)?;
    let set = label_confident(&model, &data, threshold).or_config(|| "cannot pseudo-label".into())?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).or_runtime(|| format!("cannot create {}", parent.display()))?;
        }
        let s = serde_json::to_string_pretty(&set).or_runtime(|| "cannot serialize pseudo labels".into())?;
        fs::write(out, s).or_runtime(|| format!("cannot write {}", out.display()))?;
    }
    let mut counts = vec![0usize; data.num_classes];
    for &l in &set.labels {
        counts[l] += 1;
    }
    let text = format!(
        "{} of {} samples at confidence >= {threshold}; per class {counts:?}\n",
        set.len(),
        data.len()
    );
    ctx.emit(
        &text,
        &json!({
            "data": a.data.display().to_string(),
            "threshold": threshold,
            "samples": data.len(),
            "labeled": set.len(),
            "per_class": counts,
            "out": a.out.as_ref().map(|p| p.display().to_string()),
        }),
    )
}

pub fn inspect(ctx: &Context, a: InspectArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let r = report::inspect_report(&a.model.display().to_string(), &model)
        .or_runtime(|| "cannot count FLOPs".into())?;
    ctx.emit(&report::inspect_text(&r), &r)
}

fn data_path(explicit: &Option<PathBuf>, root: &Option<PathBuf>, split: &str, flag: &str) -> CliResult<PathBuf> {
    match (explicit, root) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(r)) => Ok(r.join(split)),
        (None, None) => Err(config_error(format!("pass --data or --{flag}"))),
    }
}

/// Calibration images and the validation set of a prune run.
fn prune_sets(cfg: &CliConfig, a: &PruneArgs, model: &ModelGraph) -> CliResult<(Dataset, Dataset)> {
    let calib_path = data_path(&a.calib, &a.data, "source_train", "calib")?;
    let source = load_labelled(&calib_path)?;
    check_input(model, &source, &calib_path)?;
    let (calib, val) = match &a.pseudo {
        Some(pseudo_path) => {
            let target_path = data_path(&a.target, &a.data, "target_train", "target")?;
            let target = load_dataset(&target_path)?;
            check_input(model, &target, &target_path)?;
            let text = fs::read_to_string(pseudo_path)
                .or_config(|| format!("cannot read pseudo labels {}", pseudo_path.display()))?;
            let pseudo: PseudoLabeledSet = serde_json::from_str(&text)
                .or_config(|| format!("invalid pseudo labels {}", pseudo_path.display()))?;
            build_mixed_sets(&source, &pseudo, &target, &cfg.mix)
                .or_config(|| format!("cannot mix {} with {}", calib_path.display(), target_path.display()))?
        }
        None => {
            let val_path = data_path(&a.val, &a.data, "source_val", "val")?;
            let val = load_labelled(&val_path)?;
            check_input(model, &val, &val_path)?;
            (source, val)
        }
    };
    let calib = calib.head(cfg.calibration.images).or_runtime(|| "cannot slice calibration set".into())?;
    if calib.is_empty() || val.is_empty() {
        return Err(config_error("calibration and validation sets must not be empty"));
    }
    Ok((calib, val))
}

pub fn prune(ctx: &Context, mut cfg: CliConfig, a: PruneArgs) -> CliResult<()> {
    let started = Utc::now();
    let p = &mut cfg.prune;
    if let Some(v) = a.target_ratio {
        p.target_ratio = v;
    }
    if let Some(v) = a.top_n {
        p.top_n = v;
    }
    if let Some(v) = a.jobs {
        p.jobs = v;
    }
    if let Some(v) = a.seed {
        p.layer.sampler.seed = v;
        cfg.mix.seed = v;
    }
    if let Some(v) = a.calib_images {
        cfg.calibration.images = v;
    }
    if cfg.calibration.images == 0 {
        return Err(config_error("calibration images must be positive"));
    }
    let model = load_model(&a.model)?;
    cfg.prune.validate(&model).or_config(|| "invalid prune settings".into())?;
    cfg.mix.validate().or_config(|| "invalid mix settings".into())?;
    let (calib, val) = prune_sets(&cfg, &a, &model)?;

    let mut run_cfg = cfg.prune.clone();
    run_cfg.checkpoint_dir = Some(a.out.clone());
    info!(
        "pruning {} to {}x with {} calibration images, {} validation samples",
        a.model.display(),
        run_cfg.target_ratio,
        calib.len(),
        val.len()
    );
    let (run, failure) = match run_pcp(&model, &run_cfg, &calib.images, &val) {
        Ok(run) => (run, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let status = if failure.is_some() { "failed" } else { "ok" };
    write_provenance(ctx, "prune", &cfg, &a.out, started, status)?;
    let table = report::remained_table(&model, &run);
    let path = a.out.join(REPORT_FILE);
    fs::write(&path, &table).or_runtime(|| format!("cannot write {}", path.display()))?;

    let doc = prune_report(&a, &cfg, &run, &calib, &val, failure.as_ref().map(|e| e.to_string()));
    let mut text = table;
    if run.records.is_empty() && failure.is_none() {
        text.push_str(&format!(
            "target ratio {} already reached by the input model; no iterations run\n",
            cfg.prune.target_ratio
        ));
    } else if let Some(m) = &doc.final_model {
        text.push_str(&format!("final ratio {:.3}x, model {m}\n", doc.final_ratio));
    }
    match failure {
        None => ctx.emit(&text, &doc),
        Some(e) => {
            // The partial series stays on disk and in the output.
            ctx.emit(&text, &doc)?;
            Err(CliError::Runtime(anyhow::Error::new(e).context(format!(
                "pruning stopped after {} iterations; partial results in {}",
                run.records.len(),
                a.out.display()
            ))))
        }
    }
}

fn prune_report(
    a: &PruneArgs,
    cfg: &CliConfig,
    run: &PcpRun,
    calib: &Dataset,
    val: &Dataset,
    error: Option<String>,
) -> report::PruneReport {
    let last = run.records.last();
    report::PruneReport {
        status: if error.is_some() { "failed" } else { "ok" },
        error,
        out: a.out.display().to_string(),
        target_ratio: cfg.prune.target_ratio,
        iterations: run.records.len(),
        initial_flops: run.initial_flops,
        final_flops: last.map_or(run.initial_flops, |r| r.flops),
        final_ratio: run.final_ratio(),
        final_model: last.and_then(|r| r.checkpoint.as_ref()).map(|p| p.display().to_string()),
        calibration_images: calib.len(),
        validation_samples: val.len(),
        records: run.records.iter().map(Into::into).collect(),
    }
}
