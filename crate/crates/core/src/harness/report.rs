use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::MetricsReport;

pub const REPORT_COLUMNS: [&str; 10] =
    ["method", "mrr", "ndcg", "r@1", "r@5", "r@10", "r@20", "condr@1", "condr@5", "condr@10"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    JsonLines,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::JsonLines => "jsonl",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            other => Err(format!("unknown format {other:?} (expected csv, md or jsonl)")),
        }
    }
}

/// One results-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub report: MetricsReport,
}

fn cells(r: &MetricsReport) -> [Option<f64>; 9] {
    [
        Some(r.mrr),
        Some(r.ndcg),
        r.recall(1),
        r.recall(5),
        r.recall(10),
        r.recall(20),
        r.cond_recall(1),
        r.cond_recall(5),
        r.cond_recall(10),
    ]
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = REPORT_COLUMNS.join(",") + "\n";
    for row in rows {
        let vals: Vec<String> = cells(&row.report).iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
        s.push_str(&format!("{},{}\n", row.method, vals.join(",")));
    }
    s
}

pub fn to_markdown(rows: &[ReportRow]) -> String {
    let mut s = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for row in rows {
        let vals: Vec<String> =
            cells(&row.report).iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())).collect();
        s.push_str(&format!("| {} | {} |\n", row.method, vals.join(" | ")));
    }
    s
}

pub fn to_jsonl(rows: &[ReportRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("rows serialise") + "\n").collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<ReportRow>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::SchemaError { row: i + 1, field: e.to_string() }))
        .collect()
}

pub fn render(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => to_csv(rows),
        ReportFormat::Markdown => to_markdown(rows),
        ReportFormat::JsonLines => to_jsonl(rows),
    }
}

/// Writes `<dir>/<stem>.<ext>` and returns its path.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, dir: &Path, stem: &str) -> Result<PathBuf, HarnessError> {
    let path = dir.join(format!("{stem}.{}", format.extension()));
    std::fs::write(&path, render(rows, format)).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}
