//! Result rows and their two serializations.
//!
//! CSV columns, in order:
//!
//! ```text
//! task,method,spec,tau,scope,projections,trainable_count,head_count,
//! accuracy,f1,matched,mismatched,seed,wall_time_s
//! ```
//!
//! `tau` is empty unless the method is QR-LoRA; `scope` and `projections`
//! are empty for full fine-tuning. Sets are joined with `;`. A failed cell
//! keeps its echo columns, leaves every metric column empty and appends
//! ` [error: <message>]` to `spec`. The JSON-lines mirror carries the same
//! fields by name, with `null` for empty cells and an `error` key.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, Method};
use crate::error::Result;

pub const CSV_HEADER: [&str; 14] = [
    "task",
    "method",
    "spec",
    "tau",
    "scope",
    "projections",
    "trainable_count",
    "head_count",
    "accuracy",
    "f1",
    "matched",
    "mismatched",
    "seed",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub method: Method,
    pub spec: String,
    pub trainable_count: usize,
    pub head_count: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub matched_accuracy: Option<f64>,
    pub mismatched_accuracy: Option<f64>,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// Equality on every field except `wall_time_s`.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        } == Self {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// One sweep cell: what was asked and what came back.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub task: String,
    pub spec: AdapterSpec,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsRecord, String>,
}

impl CellReport {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

#[derive(Serialize)]
struct Row<'a> {
    task: &'a str,
    method: &'a str,
    spec: String,
    tau: Option<f64>,
    scope: Option<String>,
    projections: Option<String>,
    trainable_count: Option<usize>,
    head_count: Option<usize>,
    accuracy: Option<f64>,
    f1: Option<f64>,
    matched: Option<f64>,
    mismatched: Option<f64>,
    seed: u64,
    wall_time_s: Option<f64>,
    error: Option<&'a str>,
}

fn row(cell: &CellReport) -> Row<'_> {
    let spec = &cell.spec;
    let full = spec.method == Method::FullFt;
    let m = cell.outcome.as_ref().ok();
    Row {
        task: &cell.task,
        method: spec.method.as_str(),
        spec: match &cell.outcome {
            Ok(_) => spec.label(),
            Err(e) => format!("{} [error: {e}]", spec.label()),
        },
        tau: (spec.method == Method::QrLora).then(|| spec.policy.tau()).flatten(),
        scope: (!full).then(|| spec.layer_scope.to_string()),
        projections: (!full).then(|| spec.projections_label()),
        trainable_count: m.map(|m| m.trainable_count),
        head_count: m.map(|m| m.head_count),
        accuracy: m.map(|m| m.accuracy),
        f1: m.map(|m| m.f1),
        matched: m.and_then(|m| m.matched_accuracy),
        mismatched: m.and_then(|m| m.mismatched_accuracy),
        seed: cell.seed,
        wall_time_s: m.map(|m| m.wall_time_s),
        error: cell.outcome.as_ref().err().map(String::as_str),
    }
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_csv(w: impl Write, cells: &[CellReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for c in cells {
        let r = row(c);
        out.write_record([
            r.task.to_string(),
            r.method.to_string(),
            r.spec,
            cell(r.tau),
            cell(r.scope),
            cell(r.projections),
            cell(r.trainable_count),
            cell(r.head_count),
            cell(r.accuracy),
            cell(r.f1),
            cell(r.matched),
            cell(r.mismatched),
            r.seed.to_string(),
            cell(r.wall_time_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl(mut w: impl Write, cells: &[CellReport]) -> Result<()> {
    for c in cells {
        serde_json::to_writer(&mut w, &row(c))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over classes that occur in `truth` or
/// `pred`.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
