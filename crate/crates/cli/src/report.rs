use std::fs;
use std::path::Path;

use qwha_core::analysis::AnalysisReport;
use serde::Serialize;

use crate::{CliResult, Failure};

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::validation(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: Option<&Path>) -> CliResult<()> {
    let to_failure = |e: csv::Error| Failure::io(e.to_string());
    match path {
        Some(p) => {
            let mut w = csv::Writer::from_path(p).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
            for r in rows {
                w.serialize(r).map_err(to_failure)?;
            }
            w.flush().map_err(|e| Failure::io(e.to_string()))
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in rows {
                w.serialize(r).map_err(to_failure)?;
            }
            w.flush().map_err(|e| Failure::io(e.to_string()))
        }
    }
}

/// One tabular line per analyzed cell.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub layer: String,
    pub method: String,
    pub kernel: String,
    pub two_sided: bool,
    pub seed: u64,
    pub budget: usize,
    pub pre_error: f64,
    pub post_error: f64,
    pub rank_f: Option<usize>,
    pub normalized_rank_f: Option<f64>,
    pub rank_delta: usize,
    pub normalized_rank_delta: f64,
    pub hill: Option<f64>,
    pub hill_top_k: usize,
    pub outlier_coverage: Option<f64>,
    pub ill_conditioned_channels: usize,
}

impl From<&AnalysisReport> for ReportRow {
    fn from(r: &AnalysisReport) -> Self {
        Self {
            layer: r.layer.clone(),
            method: r.strategy.map_or_else(|| "given".to_string(), |s| s.to_string()),
            kernel: r.kernel.to_string(),
            two_sided: r.two_sided,
            seed: r.seed,
            budget: r.budget,
            pre_error: r.pre_error,
            post_error: r.post_error,
            rank_f: Some(r.rank_f),
            normalized_rank_f: Some(r.normalized_rank_f),
            rank_delta: r.rank_delta,
            normalized_rank_delta: r.normalized_rank_delta,
            hill: r.hill,
            hill_top_k: r.hill_top_k,
            outlier_coverage: Some(r.outlier_coverage),
            ill_conditioned_channels: r.ill_conditioned_channels,
        }
    }
}
