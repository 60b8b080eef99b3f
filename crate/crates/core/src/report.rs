//! Before/after compression accounting and the files a pruning run leaves
//! behind.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csv::{create_dir, Table};
use crate::driver::{AlphaTrial, KeepAllReason, LayerSearchRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::graph::ModelGraph;
use crate::prune::{count_filters, count_flops, count_params};
use crate::train::CurvePoint;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub filters: usize,
    pub params: usize,
    pub flops: u64,
}

impl Metrics {
    fn of(ckpt: &Checkpoint, accuracy: f64) -> Result<Self> {
        Ok(Self {
            accuracy,
            filters: count_filters(&ckpt.graph),
            params: count_params(ckpt),
            flops: count_flops(&ckpt.graph)?,
        })
    }
}

/// A reduction as a full-precision percentage plus its two-decimal rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub percent: f64,
    pub display: String,
}

impl Reduction {
    pub fn between(base: f64, pruned: f64) -> Self {
        let percent = if base == 0.0 {
            0.0
        } else {
            (base - pruned) / base * 100.0
        };
        Self {
            percent,
            display: format!("{percent:.2}%"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub filters: Reduction,
    pub params: Reduction,
    pub flops: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub original_filters: usize,
    pub kept_filters: usize,
    /// `None` when the layer was kept whole.
    pub accepted_alpha: Option<f64>,
    pub keep_all_reason: Option<KeepAllReason>,
    pub mu: f64,
    pub sigma: f64,
    pub rollback_events: usize,
    pub recovery_curve: Vec<CurvePoint>,
    pub tried: Vec<AlphaTrial>,
}

/// A conv the search never touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedLayer {
    pub layer: usize,
    pub filters: usize,
    /// Shortcut projections are not counted as filters.
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub report_version: u32,
    pub arch: String,
    pub baseline: Metrics,
    pub pruned: Metrics,
    pub reductions: Reductions,
    /// Ascending by layer; empty for a counts-only report.
    pub per_layer: Vec<LayerReport>,
    pub excluded: Vec<ExcludedLayer>,
}

fn same_architecture(a: &ModelGraph, b: &ModelGraph) -> bool {
    a.arch == b.arch
        && a.num_classes == b.num_classes
        && a.input_shape == b.input_shape
        && a.blocks == b.blocks
        && a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(x, y)| {
            (x.kind, x.kernel, x.stride, x.pad, x.prunable)
                == (y.kind, y.kernel, y.stride, y.pad, y.prunable)
        })
}

/// Compares a baseline against its pruned descendant. With no `records` the
/// report carries counts only; otherwise `records` must cover every
/// prunable conv and agree with the pruned widths.
pub fn summarize(
    baseline: &Checkpoint,
    pruned: &Checkpoint,
    records: &[LayerSearchRecord],
) -> Result<PruneReport> {
    baseline.validate()?;
    pruned.validate()?;
    if !same_architecture(&baseline.graph, &pruned.graph) {
        return Err(Error::Input(format!(
            "checkpoints have different architectures ({} vs {})",
            baseline.graph.arch, pruned.graph.arch
        )));
    }
    let base = Metrics::of(baseline, baseline.meta.baseline_accuracy)?;
    let after = Metrics::of(
        pruned,
        pruned
            .meta
            .accuracy
            .unwrap_or(pruned.meta.baseline_accuracy),
    )?;
    let reductions = Reductions {
        filters: Reduction::between(base.filters as f64, after.filters as f64),
        params: Reduction::between(base.params as f64, after.params as f64),
        flops: Reduction::between(base.flops as f64, after.flops as f64),
    };

    let graph = &pruned.graph;
    let prunable = graph.prunable_indices();
    let projections = graph.projection_convs();
    let excluded: Vec<ExcludedLayer> = graph
        .conv_indices()
        .into_iter()
        .filter(|i| !prunable.contains(i))
        .map(|layer| ExcludedLayer {
            layer,
            filters: graph.layers[layer].out_channels,
            projection: projections.contains(&layer),
        })
        .collect();

    let mut per_layer = Vec::new();
    if !records.is_empty() {
        for &layer in &prunable {
            let rec = records.iter().find(|r| r.layer == layer).ok_or_else(|| {
                Error::Input(format!("no search record for prunable layer {layer}"))
            })?;
            let kept = graph.layers[layer].out_channels;
            if rec.kept_filters() != kept
                || rec.original_filters != baseline.graph.layers[layer].out_channels
            {
                return Err(Error::Invariant(format!(
                    "layer {layer}: record says {} of {} filters kept, checkpoints say {kept} of {}",
                    rec.kept_filters(),
                    rec.original_filters,
                    baseline.graph.layers[layer].out_channels
                )));
            }
            per_layer.push(LayerReport {
                layer,
                original_filters: rec.original_filters,
                kept_filters: kept,
                accepted_alpha: rec.accepted_alpha(),
                keep_all_reason: rec.keep_all_reason,
                mu: rec.mu,
                sigma: rec.sigma,
                rollback_events: rec.rollback_events,
                recovery_curve: rec.recovery_curve.clone(),
                tried: rec.tried.clone(),
            });
        }
        let counted: usize = per_layer.iter().map(|l| l.kept_filters).sum::<usize>()
            + excluded
                .iter()
                .filter(|e| !e.projection)
                .map(|e| e.filters)
                .sum::<usize>();
        if counted != after.filters {
            return Err(Error::Invariant(format!(
                "per-layer filters sum to {counted}, pruned model has {}",
                after.filters
            )));
        }
    }

    Ok(PruneReport {
        report_version: REPORT_VERSION,
        arch: graph.arch.clone(),
        baseline: base,
        pruned: after,
        reductions,
        per_layer,
        excluded,
    })
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const LAYERS_FILE: &str = "layers.csv";

pub fn recovery_file(layer: usize) -> String {
    format!("recovery_{layer}.csv")
}

/// `epoch,accuracy` rows.
pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut table = Table::new(&["epoch", "accuracy"]);
    for p in curve {
        table.row(&[&p.epoch, &p.accuracy]);
    }
    table.write(path)
}

/// Writes `summary.json`, plus `layers.csv` and one `recovery_<layer>.csv`
/// per layer when the report has per-layer detail.
pub fn emit(report: &PruneReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut json =
        serde_json::to_string_pretty(report).map_err(|e| Error::Invariant(e.to_string()))?;
    json.push('\n');
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    if report.per_layer.is_empty() {
        return Ok(());
    }

    let mut layers = Table::new(&["layer", "original", "kept", "alpha"]);
    for l in &report.per_layer {
        let alpha = l
            .accepted_alpha
            .map_or_else(|| "keep-all".to_string(), |a| a.to_string());
        layers.row(&[&l.layer, &l.original_filters, &l.kept_filters, &alpha]);
        write_curve(&l.recovery_curve, &dir.join(recovery_file(l.layer)))?;
    }
    layers.write(&dir.join(LAYERS_FILE))
}

pub fn load_report(path: &Path) -> Result<PruneReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}
