//! Per-epoch metrics tables and their CSV/JSON serializations.
//!
//! Floats are written with 9 significant digits in both formats, so a JSON
//! export parses to exactly the values of the CSV it came from. Absent values
//! are empty CSV cells and JSON `null`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

pub const METRICS_COLUMNS: [&str; 6] = ["epoch", "loss", "recall_at_1", "lr", "teacher_mse", "teacher_huber"];
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub recall_at_1: Option<f64>,
    pub lr: f64,
    pub teacher_mse: Option<f64>,
    pub teacher_huber: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

/// `v` with 9 significant digits, e.g. `5.27000000e-1`.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// The value a 9-significant-digit round trip produces.
pub fn round_sig9(v: f64) -> f64 {
    format_float(v).parse().expect("formatted float parses")
}

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            format_float(r.loss),
            cell(r.recall_at_1),
            format_float(r.lr),
            cell(r.teacher_mse),
            cell(r.teacher_huber),
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty metrics file"))?;
    if header != METRICS_COLUMNS.join(",") {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let bad = |n: usize, what: &str| Error::format(path, format!("line {}: {what}", n + 2));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != METRICS_COLUMNS.len() {
            return Err(bad(n, "wrong number of cells"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(MetricsRow {
            epoch: cells[0].parse().map_err(|_| bad(n, "bad epoch"))?,
            loss: num(cells[1])?,
            recall_at_1: opt(cells[2])?,
            lr: num(cells[3])?,
            teacher_mse: opt(cells[4])?,
            teacher_huber: opt(cells[5])?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsJson {
    columns: Vec<String>,
    rows: Vec<MetricsRow>,
}

pub fn metrics_to_json(rows: &[MetricsRow]) -> String {
    let r = |v: Option<f64>| v.map(round_sig9);
    let rows = rows
        .iter()
        .map(|row| MetricsRow {
            epoch: row.epoch,
            loss: round_sig9(row.loss),
            recall_at_1: r(row.recall_at_1),
            lr: round_sig9(row.lr),
            teacher_mse: r(row.teacher_mse),
            teacher_huber: r(row.teacher_huber),
        })
        .collect();
    let doc = MetricsJson {
        columns: METRICS_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}

pub fn parse_metrics_json(text: &str) -> Result<Vec<MetricsRow>> {
    let doc: MetricsJson = serde_json::from_str(text)?;
    Ok(doc.rows)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = run_dir.join(METRICS_FILE);
    let bytes = read_file(&path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(&path, "not utf-8"))?;
    parse_metrics_csv(&text, &path)
}

/// Re-serializes `run_dir/metrics.csv` into `out`, or into
/// `run_dir/export/metrics.<ext>` when `out` is `None`.
pub fn export_metrics(run_dir: &Path, format: ExportFormat, out: Option<&Path>) -> Result<PathBuf> {
    let rows = read_metrics(run_dir)?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => run_dir.join("export").join(format!("metrics.{}", format.extension())),
    };
    let text = match format {
        ExportFormat::Csv => metrics_to_csv(&rows),
        ExportFormat::Json => metrics_to_json(&rows),
    };
    write_file(&target, text.as_bytes())?;
    Ok(target)
}
