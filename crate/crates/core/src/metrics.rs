//! Accuracy evaluation and compression accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::purify::structural_weights;

/// Samples per evaluation shard.
pub const EVAL_SHARD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over the whole dataset.
pub fn evaluate(model: &LayerGraph, data: &Dataset) -> Result<Evaluation> {
    evaluate_sharded(model, data, EVAL_SHARD)
}

/// [`evaluate`] with an explicit shard size. Per-sample losses are summed in
/// sample order, so the result does not depend on the thread count.
pub fn evaluate_sharded(model: &LayerGraph, data: &Dataset, shard: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let classes = model.num_classes();
    if let Some(bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let n = data.len();
    let ranges: Vec<_> = (0..n)
        .step_by(shard.max(1))
        .map(|s| s..(s + shard.max(1)).min(n))
        .collect();
    let parts: Vec<Vec<(f64, bool)>> = ranges
        .into_par_iter()
        .map(|r| {
            let batch = data.range_batch(r);
            let logits = model.forward(&batch.images)?;
            Ok(logits
                .data()
                .chunks_exact(classes)
                .zip(&batch.labels)
                .map(|(row, &label)| sample_loss(row, label))
                .collect())
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (l, hit) in parts.into_iter().flatten() {
        loss += l;
        correct += hit as usize;
    }
    let mean_loss = loss / n as f64;
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite evaluation loss {mean_loss}")));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss,
    })
}

/// Cross-entropy of one logit row and whether its argmax (lowest index on
/// ties) equals the label.
fn sample_loss(row: &[f64], label: usize) -> (f64, bool) {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    let max = row[best];
    let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
    (denom.ln() + max - row[label], best == label)
}

/// Per-layer sizes of the unpruned network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCounts {
    pub layers: BTreeMap<String, LayerSize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSize {
    pub weights: usize,
    pub filters: usize,
    pub columns: usize,
}

impl BaselineCounts {
    pub fn of(model: &LayerGraph) -> Self {
        let layers = model
            .weighted_ids()
            .into_iter()
            .map(|id| {
                let w = model.node(id).weights();
                let (rows, cols) = w.lowered_shape();
                (
                    model.node(id).name.clone(),
                    LayerSize {
                        weights: w.len(),
                        filters: rows,
                        columns: cols,
                    },
                )
            })
            .collect();
        BaselineCounts { layers }
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(|l| l.weights).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub total: usize,
    pub nonzero: usize,
    pub live_filters: usize,
    pub total_filters: usize,
    pub live_columns: usize,
    pub total_columns: usize,
    /// Weights left after compaction.
    pub structural: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub total: usize,
    pub nonzero: usize,
    pub structural: usize,
    pub nonzero_rate: f64,
    pub structural_rate: f64,
    /// Nonzero rate of the model before purification, when known.
    pub nonzero_rate_before: Option<f64>,
    pub before: Option<Evaluation>,
    pub after: Option<Evaluation>,
    pub config: BTreeMap<String, String>,
}

fn rate(total: usize, kept: usize) -> f64 {
    if kept == 0 {
        f64::INFINITY
    } else {
        total as f64 / kept as f64
    }
}

/// Counts nonzero and structurally surviving weights against the baseline
/// sizes. Only weight tensors count; biases are excluded.
pub fn compression_stats(model: &LayerGraph, baseline: &BaselineCounts) -> Result<CompressionReport> {
    let structural = structural_weights(model)?;
    let mut layers = Vec::new();
    for id in model.weighted_ids() {
        let node = model.node(id);
        let base = baseline
            .layers
            .get(&node.name)
            .ok_or_else(|| Error::Usage(format!("baseline has no layer `{}`", node.name)))?;
        let w = node.weights();
        let (rows, cols) = w.lowered_shape();
        let d = w.data();
        let live_filters = (0..rows)
            .filter(|&r| d[r * cols..(r + 1) * cols].iter().any(|v| *v != 0.0))
            .count();
        let live_columns = (0..cols).filter(|&c| (0..rows).any(|r| d[r * cols + c] != 0.0)).count();
        layers.push(LayerReport {
            layer: node.name.clone(),
            total: base.weights,
            nonzero: w.count_nonzero(),
            live_filters,
            total_filters: base.filters,
            live_columns,
            total_columns: base.columns,
            structural: structural[&node.name].weights,
        });
    }
    let total = layers.iter().map(|l| l.total).sum();
    let nonzero = layers.iter().map(|l| l.nonzero).sum();
    let kept = layers.iter().map(|l| l.structural).sum();
    Ok(CompressionReport {
        total,
        nonzero,
        structural: kept,
        nonzero_rate: rate(total, nonzero),
        structural_rate: rate(total, kept),
        nonzero_rate_before: None,
        layers,
        before: None,
        after: None,
        config: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Usage(format!("unknown report format `{s}` (table|csv)"))),
        }
    }
}

pub const CSV_HEADER: &str = "layer,total,nonzero,live_filters,total_filters,live_columns,total_columns";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_report(report: &CompressionReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = format!("{CSV_HEADER}\r\n");
            for l in &report.layers {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{},{}\r\n",
                    csv_field(&l.layer),
                    l.total,
                    l.nonzero,
                    l.live_filters,
                    l.total_filters,
                    l.live_columns,
                    l.total_columns
                );
            }
            out
        }
        ReportFormat::Table => table(report),
    }
}

fn table(r: &CompressionReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>9} {:>9} {:>11} {:>13} {:>10}",
        "layer", "total", "nonzero", "after P-RM", "filters", "columns", "rate"
    );
    for l in &r.layers {
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9} {:>11} {:>13} {:>9.2}x",
            l.layer,
            l.total,
            l.nonzero,
            l.structural,
            format!("{}/{}", l.live_filters, l.total_filters),
            format!("{}/{}", l.live_columns, l.total_columns),
            rate(l.total, l.nonzero)
        );
    }
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>9} {:>9}",
        "TOTAL", r.total, r.nonzero, r.structural
    );
    let _ = writeln!(out);
    if let Some(b) = r.nonzero_rate_before {
        let _ = writeln!(out, "nonzero rate before P-RM:    {b:.2}x");
    }
    let _ = writeln!(out, "nonzero compression rate:    {:.2}x", r.nonzero_rate);
    let _ = writeln!(out, "structural compression rate: {:.2}x", r.structural_rate);
    for (label, e) in [("before", r.before), ("after", r.after)] {
        if let Some(e) = e {
            let _ = writeln!(
                out,
                "accuracy {label:<6}: {:.4}%  loss {:.6}",
                e.accuracy * 100.0,
                e.mean_loss
            );
        }
    }
    if !r.config.is_empty() {
        let _ = writeln!(out);
        for (k, v) in &r.config {
            let _ = writeln!(out, "# {k} = {v}");
        }
    }
    out
}
