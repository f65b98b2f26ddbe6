use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::protocol::MetricsReport;
use crate::error::{Error, Result};
use crate::fewshot::{scales_label, HeadConfig};

/// Column order of the results table.
pub const REPORT_COLUMNS: [&str; 8] = ["task", "n_way", "k_shot", "scales", "metric", "pretrained", "mean_acc", "ci95"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub scales: String,
    pub metric: String,
    pub pretrained: bool,
    pub mean_acc: f64,
    pub ci95: f64,
}

impl ReportRow {
    pub fn new(task: impl Into<String>, n_way: usize, k_shot: usize, head: &HeadConfig, report: &MetricsReport) -> Self {
        Self {
            task: task.into(),
            n_way,
            k_shot,
            scales: scales_label(&head.scales),
            metric: head.metric.to_string(),
            pretrained: head.pretrained,
            mean_acc: report.mean_accuracy,
            ci95: report.ci95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    /// From a file extension, defaulting to CSV.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            o => Err(Error::InvalidArgument(format!("unknown report format `{o}` (csv, json)"))),
        }
    }
}

pub fn report(rows: &[ReportRow], path: &Path, format: ReportFormat) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no results to report".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        ReportFormat::Json => {
            fs::write(path, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<ReportRow>> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize().map(|row| row.map_err(Into::into)).collect()
        }
        ReportFormat::Json => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}
