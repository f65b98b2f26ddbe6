//! Classification metrics, the episodic evaluation protocol and result tables.

mod metrics;
mod protocol;
mod report;

pub use metrics::{auc, confusion, metrics, ClassCounts, ClassificationMetrics, ConfusionCounts};
pub use protocol::{evaluate_protocol, mean_ci95, EpisodeResult, EvalSettings, MetricsReport};
pub use report::{read_report, report, ReportFormat, ReportRow, REPORT_COLUMNS};
