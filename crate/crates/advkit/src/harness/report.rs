//! Report materialization: `report.json` (the full [`ExperimentReport`]),
//! `results.csv` (fixed per-image columns), and three PNG charts of the
//! aggregates over ε. Emission is deterministic: re-emitting the same report
//! produces byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::plot::{LineChart, Series, PALETTE};
use super::{AggregateRow, ExperimentReport, HarnessError};
use crate::attacks::AttackKind;

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub report_json: PathBuf,
    pub results_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// CSV header; the column set is part of the tool's interface.
pub const CSV_HEADER: &str = "image_id,attack,epsilon,success,psnr_db,ssim,linf,queries";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders the per-image rows as CSV. An absent SSIM (image smaller than the
/// metric window) leaves the cell empty.
pub fn results_csv(report: &ExperimentReport) -> String {
    let mut out = String::with_capacity(64 * (report.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let ssim = row.ssim.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.image_id,
            row.attack,
            row.epsilon,
            row.success,
            row.psnr_db,
            ssim,
            row.linf,
            row.queries
        );
    }
    out
}

fn chart_series<F: Fn(&AggregateRow) -> Option<f64>>(
    aggregates: &[AggregateRow],
    value: F,
) -> Vec<Series> {
    let mut kinds: Vec<AttackKind> = Vec::new();
    for agg in aggregates {
        if !kinds.contains(&agg.attack) {
            kinds.push(agg.attack);
        }
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(idx, kind)| Series {
            name: kind.to_string(),
            points: aggregates
                .iter()
                .filter(|a| a.attack == kind)
                .filter_map(|a| value(a).map(|v| (a.epsilon, v)))
                .collect(),
            color: PALETTE[idx % PALETTE.len()],
        })
        .collect()
}

/// Writes `report.json`, `results.csv`, and the escape-rate / PSNR / SSIM
/// charts into `out_dir`, creating it if needed.
pub fn emit_report(
    report: &ExperimentReport,
    out_dir: &Path,
) -> Result<EmittedFiles, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let report_json = out_dir.join("report.json");
    let mut body = serde_json::to_vec_pretty(report)?;
    body.push(b'\n');
    write_file(&report_json, &body)?;

    let results_path = out_dir.join("results.csv");
    write_file(&results_path, results_csv(report).as_bytes())?;

    let charts = [
        (
            "escape_rate.png",
            "escape rate vs epsilon",
            "rate",
            chart_series(&report.aggregates, |a| Some(a.escape_rate)),
        ),
        (
            "psnr_db.png",
            "mean psnr vs epsilon",
            "db",
            chart_series(&report.aggregates, |a| Some(a.mean_psnr_db)),
        ),
        (
            "ssim.png",
            "mean ssim vs epsilon",
            "ssim",
            chart_series(&report.aggregates, |a| a.mean_ssim),
        ),
    ];
    let mut plots = Vec::with_capacity(charts.len());
    for (file, title, y_label, series) in charts {
        let chart = LineChart {
            title: title.to_string(),
            x_label: "epsilon".to_string(),
            y_label: y_label.to_string(),
            series,
        };
        let path = out_dir.join(file);
        chart.save_png(&path)?;
        plots.push(path);
    }

    Ok(EmittedFiles {
        report_json,
        results_csv: results_path,
        plots,
    })
}
