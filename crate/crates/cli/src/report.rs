//! Plain-text tables and the JSON documents printed under `--json`.

use std::collections::BTreeMap;
use std::fmt::Write;

use pcp_core::model::ModelGraph;
use pcp_core::pcp::{IterationRecord, PcpRun};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub kind: &'static str,
    pub prunable: bool,
    pub in_channels: Option<usize>,
    pub out_channels: Option<usize>,
    /// Kept input channels over the original width, prunable layers only.
    pub kept: Option<usize>,
    pub total: Option<usize>,
    pub remained_percent: Option<f64>,
    pub macs: u64,
}

#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub model: String,
    pub name: String,
    pub iteration: usize,
    pub compact: bool,
    pub flops: u64,
    pub layers: Vec<LayerRow>,
}

pub fn inspect_report(path: &str, model: &ModelGraph) -> pcp_core::Result<InspectReport> {
    let macs: BTreeMap<usize, _> = model.flops_breakdown()?.into_iter().map(|r| (r.layer, r)).collect();
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mask = if spec.prunable { model.input_mask(i) } else { None };
            let row = macs.get(&i);
            LayerRow {
                layer: i,
                kind: spec.op.kind(),
                prunable: spec.prunable,
                in_channels: row.map(|r| r.in_channels),
                out_channels: row.map(|r| r.out_channels),
                kept: mask.map(|m| m.nnz()),
                total: mask.map(|m| m.len()),
                remained_percent: mask.map(|m| 100.0 * m.nnz() as f64 / m.len() as f64),
                macs: row.map_or(0, |r| r.macs),
            }
        })
        .collect();
    Ok(InspectReport {
        model: path.to_string(),
        name: model.name.clone(),
        iteration: model.iteration,
        compact: model.is_compact(),
        flops: model.flops()?,
        layers,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn inspect_text(r: &InspectReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {} ({}), iteration {}", r.model, r.name, r.iteration);
    let _ = writeln!(
        s,
        "{:>5}  {:<14} {:>8} {:>8} {:>10} {:>9} {:>10}",
        "layer", "kind", "in", "out", "kept", "remained", "MACs"
    );
    for l in &r.layers {
        let kept = match (l.kept, l.total) {
            (Some(k), Some(t)) => format!("{k}/{t}"),
            _ => "-".into(),
        };
        let remained = l.remained_percent.map_or_else(|| "-".into(), |p| format!("{p:.1}%"));
        let _ = writeln!(
            s,
            "{:>5}  {:<14} {:>8} {:>8} {:>10} {:>9} {:>10}",
            l.layer,
            l.kind,
            opt(l.in_channels),
            opt(l.out_channels),
            kept,
            remained,
            l.macs
        );
    }
    let _ = writeln!(s, "total FLOPs (MACs per image): {}", r.flops);
    s
}

#[derive(Debug, Serialize)]
pub struct IterationSummary {
    pub t: usize,
    pub selected: Vec<usize>,
    pub baseline_accuracy: f64,
    pub accuracies: BTreeMap<usize, f64>,
    pub channels_removed: BTreeMap<usize, usize>,
    pub ratio: f64,
    pub flops: u64,
    pub remained_percent: BTreeMap<usize, f64>,
    pub checkpoint: Option<String>,
}

impl From<&IterationRecord> for IterationSummary {
    fn from(r: &IterationRecord) -> Self {
        IterationSummary {
            t: r.t,
            selected: r.selected.clone(),
            baseline_accuracy: r.baseline_accuracy,
            accuracies: r.accuracies.clone(),
            channels_removed: r.channels_removed.clone(),
            ratio: r.ratio,
            flops: r.flops,
            remained_percent: r.remained_percent.clone(),
            checkpoint: r.checkpoint.as_ref().map(|p| p.display().to_string()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PruneReport {
    pub status: &'static str,
    pub error: Option<String>,
    pub out: String,
    pub target_ratio: f64,
    pub iterations: usize,
    pub initial_flops: u64,
    pub final_flops: u64,
    pub final_ratio: f64,
    pub final_model: Option<String>,
    pub calibration_images: usize,
    pub validation_samples: usize,
    pub records: Vec<IterationSummary>,
}

/// Remained-channel table: one row per iteration, one column per prunable
/// layer, starting from the unpruned model at `t = 0`.
pub fn remained_table(original: &ModelGraph, run: &PcpRun) -> String {
    let layers = original.prunable_layers();
    let mut s = String::new();
    let _ = write!(s, "{:>9} {:>8} {:>10} {:>12}", "iteration", "ratio", "flops", "selected");
    for l in &layers {
        let _ = write!(s, " {:>9}", format!("L{l}"));
    }
    s.push('\n');
    let _ = write!(s, "{:>9} {:>8.3} {:>10} {:>12}", 0, 1.0, run.initial_flops, "-");
    for _ in &layers {
        let _ = write!(s, " {:>9}", "100.0%");
    }
    s.push('\n');
    for r in &run.records {
        let selected = r.selected.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
        let _ = write!(s, "{:>9} {:>8.3} {:>10} {:>12}", r.t, r.ratio, r.flops, selected);
        for l in &layers {
            let p = r.remained_percent.get(l).map_or_else(|| "-".into(), |p| format!("{p:.1}%"));
            let _ = write!(s, " {p:>9}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcp_core::model::ChannelSelection;
    use pcp_core::toybench::{build_reference_model, Architecture};

    #[test]
    fn unpruned_layers_report_full_width() {
        let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
        let r = inspect_report("m", &m).unwrap();
        assert_eq!(r.flops, m.flops().unwrap());
        assert_eq!(r.layers.iter().map(|l| l.macs).sum::<u64>(), r.flops);
        for l in r.layers.iter().filter(|l| l.prunable) {
            assert_eq!(l.remained_percent, Some(100.0));
        }
        assert!(inspect_text(&r).contains("16/16"));
    }

    #[test]
    fn pruned_layer_shows_its_kept_fraction() {
        let m = build_reference_model(Architecture::TinyVgg, 3, 8, 4, 0).unwrap();
        let sel = ChannelSelection::from_kept(16, &[0, 1, 2, 3]).unwrap();
        let m = m.apply_selection(2, &sel, m.conv(2).unwrap().weight.clone()).unwrap();
        let r = inspect_report("m", &m).unwrap();
        let row = &r.layers[2];
        assert_eq!((row.kept, row.total, row.remained_percent), (Some(4), Some(16), Some(25.0)));
    }

    #[test]
    fn empty_run_table_has_only_the_starting_row() {
        let m = build_reference_model(Architecture::TinyRes, 3, 8, 4, 0).unwrap();
        let run = PcpRun {
            initial_flops: 7,
            initial_ratio: 1.0,
            models: vec![],
            records: vec![],
        };
        let table = remained_table(&m, &run);
        assert_eq!(table.lines().count(), 2);
        assert_eq!(table.matches("100.0%").count(), m.prunable_layers().len());
    }
}
