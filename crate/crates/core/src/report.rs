// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report emission: machine CSVs for matrices and the cube, `report.json`,
//! and the one-row summary table.
//!
//! Machine files use Rust's shortest round-trip float formatting. The summary
//! table shows three decimals (two for mean peak layers).

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{PerfCube, ProbeGrid, TransferReport};

pub const REPORT_FILE: &str = "report.json";
pub const MAX_RHO_FILE: &str = "max_rho.csv";
pub const ARGMAX_LAYER_FILE: &str = "argmax_layer.csv";
pub const HEATMAP_FILE: &str = "layerwise_heatmap.csv";
pub const PERF_CUBE_FILE: &str = "perf_cube.csv";

/// Square language x language matrix, rows are train languages.
pub fn language_matrix_csv<T: Display>(languages: &[String], matrix: &[Vec<T>]) -> String {
    let mut out = String::from("train_lang");
    for lang in languages {
        out.push(',');
        out.push_str(lang);
    }
    out.push('\n');
    for (lang, row) in languages.iter().zip(matrix) {
        out.push_str(lang);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Test language x layer heatmap.
pub fn heatmap_csv(languages: &[String], heatmap: &[Vec<f64>]) -> String {
    let mut out = String::from("test_lang");
    for l in 0..heatmap.first().map_or(0, Vec::len) {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (lang, row) in languages.iter().zip(heatmap) {
        out.push_str(lang);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Long-form cube with the lambda selected for each (train language, layer).
pub fn perf_cube_csv(cube: &PerfCube, grid: &ProbeGrid) -> String {
    let langs = cube.languages();
    let mut out = String::from("train_lang,test_lang,layer,lambda,rho\n");
    for (a, train) in langs.iter().enumerate() {
        for (b, test) in langs.iter().enumerate() {
            for l in 0..cube.num_layers() {
                let lambda = grid.probe(a, l).ridge.lambda;
                let _ = writeln!(out, "{train},{test},{l},{lambda},{}", cube.get(a, b, l));
            }
        }
    }
    out
}

pub fn report_json(report: &TransferReport) -> serde_json::Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Writes `report.json` and the three matrix CSVs, plus `perf_cube.csv` when
/// a grid is given.
pub fn write_outputs(
    dir: &Path,
    report: &TransferReport,
    cube_and_grid: Option<(&PerfCube, &ProbeGrid)>,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), report_json(report)?)?;
    fs::write(
        dir.join(MAX_RHO_FILE),
        language_matrix_csv(&report.languages, &report.max_rho_matrix),
    )?;
    fs::write(
        dir.join(ARGMAX_LAYER_FILE),
        language_matrix_csv(&report.languages, &report.argmax_layer_matrix),
    )?;
    fs::write(
        dir.join(HEATMAP_FILE),
        heatmap_csv(&report.languages, &report.layerwise_heatmap),
    )?;
    if let Some((cube, grid)) = cube_and_grid {
        fs::write(dir.join(PERF_CUBE_FILE), perf_cube_csv(cube, grid))?;
    }
    Ok(())
}

/// The scalar columns of a [`TransferReport`]; parses from a full report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub diag_mean: f64,
    pub diag_std: f64,
    pub offdiag_mean: f64,
    pub offdiag_std: f64,
    pub mean_peak_layer_diag: f64,
    pub mean_peak_layer_offdiag: f64,
    pub transfer_drop: f64,
    pub in_language_drop: f64,
    pub p_value: Option<f64>,
}

impl From<&TransferReport> for SummaryRow {
    fn from(r: &TransferReport) -> Self {
        Self {
            diag_mean: r.diag_mean,
            diag_std: r.diag_std,
            offdiag_mean: r.offdiag_mean,
            offdiag_std: r.offdiag_std,
            mean_peak_layer_diag: r.mean_peak_layer_diag,
            mean_peak_layer_offdiag: r.mean_peak_layer_offdiag,
            transfer_drop: r.transfer_drop,
            in_language_drop: r.in_language_drop,
            p_value: r.p_value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for SummaryFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown format {other:?} (expected csv, json or markdown)")),
        }
    }
}

struct DisplayCells {
    diag_mean: String,
    diag_std: String,
    offdiag_mean: String,
    offdiag_std: String,
    peak_diag: String,
    peak_offdiag: String,
    transfer_drop: String,
    in_language_drop: String,
    p_value: String,
}

impl From<&SummaryRow> for DisplayCells {
    fn from(s: &SummaryRow) -> Self {
        Self {
            diag_mean: format!("{:.3}", s.diag_mean),
            diag_std: format!("{:.3}", s.diag_std),
            offdiag_mean: format!("{:.3}", s.offdiag_mean),
            offdiag_std: format!("{:.3}", s.offdiag_std),
            peak_diag: format!("{:.2}", s.mean_peak_layer_diag),
            peak_offdiag: format!("{:.2}", s.mean_peak_layer_offdiag),
            transfer_drop: format!("{:.3}", s.transfer_drop),
            in_language_drop: format!("{:.3}", s.in_language_drop),
            p_value: s.p_value.map_or_else(|| "n/a".to_string(), |p| format!("{p:.2e}")),
        }
    }
}

pub fn render_summary(row: &SummaryRow, format: SummaryFormat) -> serde_json::Result<String> {
    let c = DisplayCells::from(row);
    Ok(match format {
        SummaryFormat::Markdown => format!(
            "| Same-lang rho | Cross-lang rho | Same-lang peak layer | Cross-lang peak layer | Transfer drop | In-lang drop | p-value |\n\
             |---|---|---|---|---|---|---|\n\
             | {} ± {} | {} ± {} | {} | {} | {} | {} | {} |\n",
            c.diag_mean,
            c.diag_std,
            c.offdiag_mean,
            c.offdiag_std,
            c.peak_diag,
            c.peak_offdiag,
            c.transfer_drop,
            c.in_language_drop,
            c.p_value
        ),
        SummaryFormat::Csv => format!(
            "diag_mean,diag_std,offdiag_mean,offdiag_std,mean_peak_layer_diag,mean_peak_layer_offdiag,transfer_drop,in_language_drop,p_value\n\
             {},{},{},{},{},{},{},{},{}\n",
            c.diag_mean,
            c.diag_std,
            c.offdiag_mean,
            c.offdiag_std,
            c.peak_diag,
            c.peak_offdiag,
            c.transfer_drop,
            c.in_language_drop,
            c.p_value
        ),
        SummaryFormat::Json => {
            let mut s = serde_json::to_string_pretty(row)?;
            s.push('\n');
            s
        }
    })
}
