//! Classification metrics and per-round record export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::model::{evaluate, ModelParams};

/// Column order of the exported CSV.
pub const CSV_HEADER: [&str; 11] = [
    "round",
    "strategy",
    "seed",
    "tau",
    "test_loss",
    "test_acc",
    "macro_f1",
    "comp_ops",
    "comm_bytes",
    "cum_comm_bytes",
    "sim_time",
];

/// One exported row. `comp_ops` and `comm_bytes` are per round;
/// `cum_comm_bytes` and `sim_time` are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub strategy: String,
    pub seed: u64,
    pub tau: usize,
    pub test_loss: f64,
    pub test_acc: f64,
    pub macro_f1: f64,
    pub comp_ops: u64,
    pub comm_bytes: u64,
    pub cum_comm_bytes: u64,
    pub sim_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn accuracy(labels: &[usize], predictions: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// `matrix[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        m[y][p] += 1;
    }
    m
}

/// Unweighted mean of per-class F1 over all `num_classes` classes. A class
/// with no true and no predicted instances scores 0.
pub fn macro_f1(labels: &[usize], predictions: &[usize], num_classes: usize) -> f64 {
    if num_classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / num_classes as f64
}

/// Loss, accuracy and macro-F1 of `params` on one split (exact forward).
pub fn compute_metrics(g: &Graph, params: &ModelParams, split: Split) -> Result<SplitMetrics> {
    let eval = evaluate(g, params, split)?;
    let labels: Vec<usize> = eval.nodes.iter().map(|&v| g.labels()[v]).collect();
    Ok(SplitMetrics {
        loss: eval.loss,
        accuracy: eval.accuracy,
        macro_f1: macro_f1(&labels, &eval.predictions, g.num_classes()),
    })
}

pub fn write_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn export_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(file)).map_err(|e| with_path(e, path))
}

/// Parses CSV text with the exact [`CSV_HEADER`].
pub fn parse_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers()?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "unexpected CSV header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes).map_err(|e| with_path(e, path))
}

pub fn export_json(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
